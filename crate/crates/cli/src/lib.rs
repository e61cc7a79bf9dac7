//! Library half of the `stformer` command: run configuration, the
//! train/eval drivers, the approximation report and the scaling benchmark.

pub mod alloc;
pub mod approx;
pub mod bench;
pub mod config;
pub mod error;
pub mod run;

pub use config::RunConfig;
pub use error::{CliError, Result};

#[global_allocator]
static GLOBAL: alloc::CountingAlloc = alloc::CountingAlloc;

/// Writes serialisable records as CSV with a header row.
pub fn write_csv<T: serde::Serialize>(path: &std::path::Path, records: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}
