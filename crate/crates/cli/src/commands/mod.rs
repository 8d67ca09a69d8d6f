mod eval;
mod explain;
mod prep;
mod stats;
mod train;

pub use eval::eval;
pub use explain::explain;
pub use prep::prep;
pub use stats::stats;
pub use train::train;

use crate::config::RunConfig;
use crate::error::Result;
use serde::Serialize;
use std::fs;
use std::path::Path;

/// Settings shared by every subcommand.
pub struct Context {
    pub cfg: RunConfig,
    pub threads: usize,
    pub subject: Option<String>,
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Applies `f` to every item on up to `threads` workers, keeping input
/// order. The first error in input order wins.
pub fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> =
            items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<R>>>())).collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker thread panicked")?);
        }
        Ok(out)
    })
}

pub fn synth(ctx: &Context) -> Result<()> {
    let out = &ctx.cfg.paths.out;
    sahnet::synth::write_cohort(&ctx.cfg.synth, out)?;
    ctx.cfg.write_resolved(out)
}
