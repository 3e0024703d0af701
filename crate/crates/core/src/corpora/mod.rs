//! Synthetic languages, their token streams and evaluation items.

mod io;
mod items;
mod language;
mod vocab;

pub use io::*;
pub use items::*;
pub use language::*;
pub use vocab::*;

/// Three anchor languages and three new ones:
///
/// * `glg`: same script and grammar as `rom`, most stems shared with it;
/// * `swa`: same script as the anchors, no inherited stems, its own grammar,
///   some loans from `anc`;
/// * `urd`: half its stems and its grammar from `hin`, written in a script
///   the vocabulary does not cover.
pub fn desk_language_specs(lexicon_size: usize) -> Vec<LanguageSpec> {
    let anc = LanguageSpec::new("anc", Charset::latin(), lexicon_size, 11);
    let rom = LanguageSpec::new("rom", Charset::latin(), lexicon_size, 12);
    let hin = LanguageSpec::new("hin", Charset::devanagari(), lexicon_size, 13);
    let glg = LanguageSpec {
        parent: Some("rom".into()),
        overlap: 0.8,
        ..LanguageSpec::new("glg", Charset::latin(), lexicon_size, 12)
    };
    let swa = LanguageSpec {
        loan_source: Some("anc".into()),
        loanword_rate: 0.15,
        ..LanguageSpec::new("swa", Charset::latin(), lexicon_size, 14)
    };
    let urd = LanguageSpec {
        parent: Some("hin".into()),
        overlap: 0.5,
        ..LanguageSpec::new("urd", Charset::arabic(), lexicon_size, 13)
    };
    vec![anc, rom, hin, glg, swa, urd]
}

pub const ANCHORS: [&str; 3] = ["anc", "rom", "hin"];
