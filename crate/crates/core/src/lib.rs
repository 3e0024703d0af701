pub mod adapters;
pub mod arithmetic;
pub mod corpora;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod store;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

/// Eval and training allocate and free multi-megabyte buffers every step;
/// the system allocator returns them to the kernel each time.
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;
