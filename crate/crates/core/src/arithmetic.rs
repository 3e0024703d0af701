//! Parameter-space arithmetic between checkpoints of one architecture.
//!
//! A [`ParamDelta`] keeps `φ − θ` as an unevaluated sum `hi + lo`, where `hi`
//! is the rounded difference and `lo` its exact rounding error. Applying a
//! delta adds `λ·(hi + lo)` with compensated summation, which makes
//! `apply(θ, delta(φ, θ), 1)` reproduce `φ` bit for bit.

use crate::error::{Error, Result};
use crate::model::{forward, Checkpoint, ModelConfig, ParamId, Provenance};
use crate::store::{content_hash, delta_hash};
use crate::tensor::Tensor;
use std::collections::BTreeMap;

pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const DEFAULT_SERIES_LAMBDA: f64 = 0.5;
pub const DEFAULT_MU: f64 = 0.5;
pub const DEFAULT_GAMMA: f64 = 0.7;

/// Per-parameter difference between two checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamDelta {
    config: ModelConfig,
    hi: BTreeMap<ParamId, Tensor>,
    lo: BTreeMap<ParamId, Tensor>,
    pub provenance: Provenance,
}

impl ParamDelta {
    pub fn from_parts(
        config: ModelConfig,
        hi: BTreeMap<ParamId, Tensor>,
        lo: BTreeMap<ParamId, Tensor>,
        provenance: Provenance,
    ) -> Result<Self> {
        config.validate()?;
        for id in config.param_ids() {
            let want = config.shape_of(id);
            for (part, table) in [("leading", &hi), ("residual", &lo)] {
                match table.get(&id) {
                    Some(t) if t.shape() == want.as_slice() => {}
                    Some(t) => {
                        return Err(Error::incompatible(
                            id.to_string(),
                            format!("{part} shape {:?}, config implies {want:?}", t.shape()),
                        ))
                    }
                    None => return Err(Error::incompatible(id.to_string(), format!("missing {part} part"))),
                }
            }
        }
        if hi.len() != lo.len() || hi.len() != config.param_ids().len() {
            return Err(Error::incompatible("delta", "unexpected extra parameters"));
        }
        Ok(Self {
            config,
            hi,
            lo,
            provenance,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parts(&self) -> (&BTreeMap<ParamId, Tensor>, &BTreeMap<ParamId, Tensor>) {
        (&self.hi, &self.lo)
    }

    /// The rounded difference `fl(φ − θ)` for one parameter.
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.hi[&id]
    }

    /// Ids with any non-zero entry.
    pub fn nonzero_params(&self) -> Vec<ParamId> {
        self.hi
            .iter()
            .filter(|(id, t)| {
                t.data().iter().any(|&v| v != 0.0) || self.lo[id].data().iter().any(|&v| v != 0.0)
            })
            .map(|(id, _)| *id)
            .collect()
    }
}

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Errors on the first parameter whose shape differs, then on any other
/// architectural field.
fn check_pair(a: &ModelConfig, b: &ModelConfig) -> Result<()> {
    for id in a.param_ids() {
        let other_ids_has = match id.layer_index() {
            Some(l) => l < b.n_layers,
            None => true,
        };
        if !other_ids_has {
            return Err(Error::incompatible(id.to_string(), "missing from the other operand"));
        }
        let (sa, sb) = (a.shape_of(id), b.shape_of(id));
        if sa != sb {
            return Err(Error::incompatible(id.to_string(), format!("shape {sa:?} vs {sb:?}")));
        }
    }
    if b.n_layers > a.n_layers {
        return Err(Error::incompatible(
            ParamId::layer(a.n_layers, crate::model::Component::AttnNorm).to_string(),
            "missing from the first operand",
        ));
    }
    a.check_compatible(b)
}

fn check_coefficient(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("{name} must be finite, got {v}")))
    }
}

/// `φ − θ`.
pub fn delta(phi: &Checkpoint, theta: &Checkpoint) -> Result<ParamDelta> {
    check_pair(phi.config(), theta.config())?;
    let mut hi = BTreeMap::new();
    let mut lo = BTreeMap::new();
    for (id, p) in phi.params() {
        let t = theta.get(*id);
        let mut h = Vec::with_capacity(p.len());
        let mut l = Vec::with_capacity(p.len());
        for (&pv, &tv) in p.data().iter().zip(t.data()) {
            let (s, e) = two_sum(pv, -tv);
            h.push(s);
            l.push(e);
        }
        hi.insert(*id, Tensor::new(p.shape().to_vec(), h)?);
        lo.insert(*id, Tensor::new(p.shape().to_vec(), l)?);
    }
    let mut provenance = Provenance::new();
    provenance.insert("op".into(), "delta".into());
    provenance.insert("minuend".into(), content_hash(phi)?);
    provenance.insert("subtrahend".into(), content_hash(theta)?);
    ParamDelta::from_parts(*phi.config(), hi, lo, provenance)
}

/// `θ + λ·(hi + lo)` for one element.
#[inline]
fn apply_one(t: f64, hi: f64, lo: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return t;
    }
    let p = lambda * hi;
    let p_err = lambda.mul_add(hi, -p);
    let (s, s_err) = two_sum(t, p);
    s + (s_err + (p_err + lambda * lo))
}

fn apply_raw(theta: &Checkpoint, d: &ParamDelta, lambda: f64) -> Result<BTreeMap<ParamId, Tensor>> {
    check_pair(theta.config(), d.config())?;
    let mut out = BTreeMap::new();
    for (id, t) in theta.params() {
        let (hi, lo) = (d.hi[id].data(), d.lo[id].data());
        let data = t
            .data()
            .iter()
            .zip(hi.iter().zip(lo))
            .map(|(&tv, (&h, &l))| apply_one(tv, h, l, lambda))
            .collect();
        let r = Tensor::new(t.shape().to_vec(), data)?;
        if !r.is_finite() {
            return Err(Error::NonFinite(format!("arithmetic result at {id}")));
        }
        out.insert(*id, r);
    }
    Ok(out)
}

/// Runs a short probe sequence through `model` and errors if any logit is
/// non-finite.
pub fn probe_finite(model: &Checkpoint) -> Result<()> {
    let cfg = model.config();
    let len = cfg.max_seq_len.min(8);
    let probe: Vec<u32> = (0..len).map(|i| (i % cfg.vocab_size) as u32).collect();
    forward(model, &probe)?.ensure_finite("probe forward pass")
}

fn finish(config: ModelConfig, params: BTreeMap<ParamId, Tensor>, provenance: Provenance) -> Result<Checkpoint> {
    let ckpt = Checkpoint::new(config, params, provenance)?;
    probe_finite(&ckpt)?;
    Ok(ckpt)
}

/// `θ + λ·δ`.
pub fn apply(theta: &Checkpoint, d: &ParamDelta, lambda: f64) -> Result<Checkpoint> {
    check_coefficient("lambda", lambda)?;
    let params = apply_raw(theta, d, lambda)?;
    let mut provenance = Provenance::new();
    provenance.insert("op".into(), "apply".into());
    provenance.insert("base".into(), content_hash(theta)?);
    provenance.insert("delta".into(), delta_hash(d)?);
    provenance.insert("lambda".into(), lambda.to_string());
    finish(*theta.config(), params, provenance)
}

/// `θ_prev + λ′·(φ_new − base)`: carry a model trained on a new language
/// over to the previously combined model. `base` is the checkpoint
/// `φ_new` was trained from.
pub fn series(
    theta_prev: &Checkpoint,
    phi_new: &Checkpoint,
    base: &Checkpoint,
    lambda: f64,
) -> Result<Checkpoint> {
    check_coefficient("lambda", lambda)?;
    check_pair(theta_prev.config(), phi_new.config())?;
    let d = delta(phi_new, base)?;
    let params = apply_raw(theta_prev, &d, lambda)?;
    let mut provenance = Provenance::new();
    provenance.insert("op".into(), "series".into());
    provenance.insert("previous".into(), content_hash(theta_prev)?);
    provenance.insert("new".into(), content_hash(phi_new)?);
    provenance.insert("residual_base".into(), content_hash(base)?);
    provenance.insert("lambda".into(), lambda.to_string());
    finish(*theta_prev.config(), params, provenance)
}

/// Weights `(w_a, w_b)` for a merge. The larger weight is taken as given and
/// the smaller as its rounded complement, so swapping the operands together
/// with `μ → 1 − μ` yields the same pair.
fn merge_weights(mu: f64) -> (f64, f64) {
    if mu >= 0.5 {
        (mu, 1.0 - mu)
    } else {
        let wb = 1.0 - mu;
        (1.0 - wb, wb)
    }
}

#[inline]
fn merge_one(a: f64, b: f64, wa: f64, wb: f64) -> f64 {
    if wb == 0.0 {
        a
    } else if wa == 0.0 {
        b
    } else {
        wa * a + wb * b
    }
}

/// `μ·a + (1 − μ)·b`.
pub fn merge(a: &Checkpoint, b: &Checkpoint, mu: f64) -> Result<Checkpoint> {
    check_coefficient("mu", mu)?;
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::config(format!("mu must lie in [0, 1], got {mu}")));
    }
    check_pair(a.config(), b.config())?;
    let (wa, wb) = merge_weights(mu);
    let mut params = BTreeMap::new();
    for (id, ta) in a.params() {
        let tb = b.get(*id);
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| merge_one(x, y, wa, wb))
            .collect();
        let r = Tensor::new(ta.shape().to_vec(), data)?;
        if !r.is_finite() {
            return Err(Error::NonFinite(format!("merge result at {id}")));
        }
        params.insert(*id, r);
    }
    let mut provenance = Provenance::new();
    provenance.insert("op".into(), "merge".into());
    provenance.insert("first".into(), content_hash(a)?);
    provenance.insert("second".into(), content_hash(b)?);
    provenance.insert("mu".into(), mu.to_string());
    finish(*a.config(), params, provenance)
}

/// `θ^it + γ·(θ_new − θ_N)`: graft what continued pretraining on a new
/// language changed onto an instruction-tuned model.
pub fn instruct(
    theta_it: &Checkpoint,
    theta_new: &Checkpoint,
    theta_n: &Checkpoint,
    gamma: f64,
) -> Result<Checkpoint> {
    check_coefficient("gamma", gamma)?;
    check_pair(theta_it.config(), theta_new.config())?;
    let d = delta(theta_new, theta_n)?;
    let params = apply_raw(theta_it, &d, gamma)?;
    let mut provenance = Provenance::new();
    provenance.insert("op".into(), "instruct".into());
    provenance.insert("instruct_model".into(), content_hash(theta_it)?);
    provenance.insert("adapted".into(), content_hash(theta_new)?);
    provenance.insert("adapted_from".into(), content_hash(theta_n)?);
    provenance.insert("gamma".into(), gamma.to_string());
    finish(*theta_it.config(), params, provenance)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apply_one_recovers_tiny_target() {
        let (t, phi) = (1.0, 2f64.powi(-60));
        let (h, l) = two_sum(phi, -t);
        assert_eq!(apply_one(t, h, l, 1.0).to_bits(), phi.to_bits());
    }

    #[test]
    fn worked_instruct_example() {
        let (h, l) = two_sum(4.0, -2.0);
        assert_eq!(apply_one(10.0, h, l, 0.7), 11.4);
    }

    #[test]
    fn merge_weights_swap_symmetrically() {
        for mu in [0.0, 0.1, 0.3, 0.5, 0.7, 0.999, 1.0] {
            let (wa, wb) = merge_weights(mu);
            let (wb2, wa2) = merge_weights(1.0 - mu);
            assert_eq!((wa, wb), (wa2, wb2), "mu {mu}");
        }
    }

    #[test]
    fn non_finite_coefficient_rejected() {
        assert!(check_coefficient("mu", f64::NAN).is_err());
    }
}
