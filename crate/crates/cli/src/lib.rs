// SPDX-License-Identifier: Apache-2.0

//! Experiment harness around the `endp` library: configuration files,
//! the `endp` subcommands, and metrics files.

pub mod commands;
pub mod config;
pub mod records;

pub use commands::Overrides;
pub use config::Config;

/// Caps the global worker pool at `ENDP_THREADS` when it is set.
pub fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("ENDP_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| anyhow::anyhow!("ENDP_THREADS must be a positive integer, got {v:?}"))?;
        anyhow::ensure!(n > 0, "ENDP_THREADS must be positive");
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}
