use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::info;
use serde::{Deserialize, Serialize};

use super::run::{prepare_output_dir, run_single, RunSummary};
use crate::config::RunConfig;
use crate::decoder::GatingMode;
use crate::error::{Error, Result};

/// Injection depth × gating mode × seed sweep around a base config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub depths: Vec<usize>,
    pub modes: Vec<GatingMode>,
    /// Seeds `base.seed, base.seed + 1, …`.
    pub seeds: usize,
    pub base: RunConfig,
}

impl AblationGrid {
    /// Depths `{0, 3, 6, 9, L_dec}` (those within the decoder), all modes, three seeds.
    pub fn with_defaults(base: RunConfig) -> Self {
        let mut depths: Vec<usize> = [0, 3, 6, 9].into_iter().filter(|&d| d < base.l_dec).collect();
        depths.push(base.l_dec);
        Self {
            depths,
            modes: GatingMode::ALL.to_vec(),
            seeds: 3,
            base,
        }
    }

    /// Every cell, depth-major then mode then seed. Each is validated.
    pub fn cells(&self) -> Result<Vec<RunConfig>> {
        if self.depths.is_empty() || self.modes.is_empty() || self.seeds == 0 {
            return Err(Error::config("grid", "depths, modes and seeds must all be non-empty"));
        }
        let mut cells = Vec::with_capacity(self.depths.len() * self.modes.len() * self.seeds);
        for &m in &self.depths {
            for &gating in &self.modes {
                for s in 0..self.seeds {
                    let cell = RunConfig {
                        m,
                        gating,
                        seed: self.base.seed + s as u64,
                        output_dir: None,
                        ..self.base.clone()
                    };
                    cell.validate()?;
                    cells.push(cell);
                }
            }
        }
        Ok(cells)
    }

    pub fn cell_name(cell: &RunConfig) -> String {
        format!("m{}_{}_seed{}", cell.m, cell.gating, cell.seed)
    }

    /// Run every cell into `root/<cell name>/` on up to `jobs` threads.
    /// Cells are independent, so the results do not depend on `jobs`.
    pub fn run(&self, root: &Path, jobs: usize) -> Result<Vec<RunSummary>> {
        let cells = self.cells()?;
        prepare_output_dir(root)?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(root.join("grid.json"), text)?;

        let next = AtomicUsize::new(0);
        let results: Mutex<Vec<Option<Result<RunSummary>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
        std::thread::scope(|scope| {
            for _ in 0..jobs.clamp(1, cells.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(cell) = cells.get(i) else { break };
                    let dir: PathBuf = root.join(Self::cell_name(cell));
                    info!("cell {}/{}: {}", i + 1, cells.len(), Self::cell_name(cell));
                    let out = run_single(cell, &dir);
                    results.lock().expect("no worker panics while holding the lock")[i] = Some(out);
                });
            }
        });
        results
            .into_inner()
            .expect("workers finished")
            .into_iter()
            .map(|r| r.expect("every cell ran"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_shape() {
        let grid = AblationGrid::with_defaults(RunConfig::default());
        assert_eq!(grid.depths, [0, 3, 6, 9, 10]);
        let cells = grid.cells().unwrap();
        assert_eq!(cells.len(), 5 * 3 * 3);
        assert_eq!(AblationGrid::cell_name(&cells[4]), "m0_sem_seed1");
    }

    #[test]
    fn invalid_cell_is_rejected() {
        let mut grid = AblationGrid::with_defaults(RunConfig::default());
        grid.depths.push(30);
        assert!(grid.cells().is_err());
    }
}
