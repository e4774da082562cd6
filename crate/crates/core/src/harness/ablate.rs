//! Ablation grids: train every configuration cell under a shared seed set
//! and score it on a held-out synthetic suite.
//!
//! A grid file uses the config syntax. A key with a comma-separated list
//! becomes an axis; a single value is a fixed override. A few keys steer
//! the protocol instead of the model:
//!
//! ```text
//! seeds=0,1,2                 training seeds
//! suite.seeds=10              evaluation sequences per scenario
//! suite.length=100
//! suite.scenarios=PLAIN,OCCLUSION
//! mcp.enabled=true,false      an axis
//! ```

use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;

use crate::config::Config;
use crate::embedding::Modality;
use crate::error::{Error, Result};
use crate::harness::metrics::{evaluate, Evaluation, Metrics, SequenceResult};
use crate::harness::model::Model;
use crate::harness::synthetic::{FrameSource, Scenario, SyntheticSequence};
use crate::harness::tracker::track_sequence;
use crate::harness::train::{train, training_set};

/// Evaluation seeds start here, far from any training seed.
pub const SUITE_SEED_BASE: u64 = 7_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct Suite {
    pub scenarios: Vec<Scenario>,
    pub per_scenario: usize,
    pub length: usize,
}

impl Default for Suite {
    fn default() -> Self {
        Self {
            scenarios: Scenario::ALL.to_vec(),
            per_scenario: 10,
            length: 100,
        }
    }
}

impl Suite {
    /// Sequence `k` of a scenario uses seed `SUITE_SEED_BASE + k` and
    /// modality `k mod 5`.
    pub fn sequences(&self, cfg: &Config) -> Result<Vec<SyntheticSequence>> {
        let mut out = Vec::new();
        for &sc in &self.scenarios {
            for k in 0..self.per_scenario {
                out.push(SyntheticSequence::generate(
                    sc,
                    Modality::ALL[k % Modality::ALL.len()],
                    self.length,
                    SUITE_SEED_BASE + k as u64,
                    cfg.data.frame_size,
                    cfg.embed.text_dim,
                )?);
            }
        }
        Ok(out)
    }
}

pub fn sequence_id(seq: &SyntheticSequence) -> String {
    format!("{}-{}-{}", seq.scenario, seq.modality, seq.seed)
}

/// Tracks every sequence (in parallel) and scores the runs.
pub fn evaluate_model(model: Arc<Model>, suite: &[SyntheticSequence]) -> Result<Evaluation> {
    let results = suite
        .par_iter()
        .map(|seq| {
            let run = track_sequence(Arc::clone(&model), seq)?;
            Ok(SequenceResult {
                sequence_id: sequence_id(seq),
                scenario: seq.scenario.to_string(),
                run,
                gt: seq.gt_boxes.clone(),
                frame_size: seq.frame_size(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate(&results)
}

/// Trains a fresh model for `cfg` (whose `seed` picks the run) and
/// returns it with its suite evaluation.
pub fn train_and_evaluate(cfg: &Config, suite: &[SyntheticSequence]) -> Result<(Model, Evaluation)> {
    let mut model = Model::new(cfg)?;
    let data = training_set(&model)?;
    train(&mut model, &data, |_| {})?;
    let model = Arc::new(model);
    let ev = evaluate_model(Arc::clone(&model), suite)?;
    let model = Arc::try_unwrap(model).map_err(|_| Error::State("model still shared after evaluation".into()))?;
    Ok((model, ev))
}

/// Config for training seed `seed`: the seed moves both the trainable
/// initialization and the training data.
pub fn seeded(cfg: &Config, seed: u64) -> Config {
    let mut c = cfg.clone();
    c.seed = seed;
    c.train.data_seed = cfg.train.data_seed + 1000 * seed;
    c
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub axes: Vec<(String, Vec<String>)>,
    pub fixed: Vec<(String, String)>,
    pub seeds: Vec<u64>,
    pub suite: Suite,
}

impl Grid {
    pub fn parse(text: &str) -> Result<Self> {
        let mut grid = Grid {
            axes: Vec::new(),
            fixed: Vec::new(),
            seeds: vec![0, 1, 2],
            suite: Suite::default(),
        };
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("grid line {}: expected key=value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let list: Vec<String> = v.split(',').map(|s| s.trim().to_string()).collect();
            let num = |s: &str| {
                s.parse::<u64>()
                    .map_err(|_| Error::Config(format!("grid line {}: bad number {s:?}", n + 1)))
            };
            match k {
                "seeds" => grid.seeds = list.iter().map(|s| num(s)).collect::<Result<_>>()?,
                "suite.seeds" => grid.suite.per_scenario = num(v)? as usize,
                "suite.length" => grid.suite.length = num(v)? as usize,
                "suite.scenarios" => {
                    grid.suite.scenarios = list.iter().map(|s| s.parse()).collect::<Result<_>>()?
                }
                _ if list.len() > 1 => grid.axes.push((k.to_string(), list)),
                _ => grid.fixed.push((k.to_string(), v.to_string())),
            }
        }
        if grid.seeds.is_empty() {
            return Err(Error::Config("grid needs at least one seed".into()));
        }
        Ok(grid)
    }

    /// Cartesian product of the axes, first axis varying slowest.
    pub fn cells(&self) -> Vec<Vec<(String, String)>> {
        let mut cells = vec![Vec::new()];
        for (key, values) in &self.axes {
            cells = cells
                .into_iter()
                .flat_map(|c| {
                    values.iter().map(move |v| {
                        let mut c = c.clone();
                        c.push((key.clone(), v.clone()));
                        c
                    })
                })
                .collect();
        }
        cells
    }

    /// Base config with the fixed overrides and then the cell's values.
    pub fn cell_config(&self, base: &Config, cell: &[(String, String)]) -> Result<Config> {
        let mut cfg = base.clone();
        for (k, v) in self.fixed.iter().chain(cell) {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub cell_id: usize,
    pub cfg: Config,
    pub per_seed: Vec<Metrics>,
    pub mean: Metrics,
}

pub fn run_grid(base: &Config, grid: &Grid, mut progress: impl FnMut(&str)) -> Result<Vec<CellResult>> {
    let suite = grid.suite.sequences(base)?;
    let mut out = Vec::new();
    for (cell_id, cell) in grid.cells().iter().enumerate() {
        let cfg = grid.cell_config(base, cell)?;
        let mut per_seed = Vec::new();
        for &seed in &grid.seeds {
            let (_, ev) = train_and_evaluate(&seeded(&cfg, seed), &suite)?;
            progress(&format!("cell {cell_id} seed {seed}: auc {:.4}", ev.overall.auc));
            per_seed.push(ev.overall);
        }
        let refs: Vec<&Metrics> = per_seed.iter().collect();
        let mean = Metrics::average(&refs);
        out.push(CellResult {
            cell_id,
            cfg,
            per_seed,
            mean,
        });
    }
    Ok(out)
}

/// `cell_id,mcp,dsf,n_m,bank_l,policy,bias,dsf_source,mean_iou,auc,precision`
pub fn grid_csv(cells: &[CellResult]) -> String {
    let mut out = String::from("cell_id,mcp,dsf,n_m,bank_l,policy,bias,dsf_source,mean_iou,auc,precision\n");
    let onoff = |b: bool| if b { "on" } else { "off" };
    for c in cells {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{:.6},{:.6},{:.6}",
            c.cell_id,
            onoff(c.cfg.mcp.enabled),
            onoff(c.cfg.dsf.enabled),
            c.cfg.mcp.n_tokens,
            c.cfg.mcp.bank_l,
            c.cfg.mcp.policy,
            c.cfg.mcp.bias,
            c.cfg.dsf.source,
            c.mean.mean_iou,
            c.mean.auc,
            c.mean.precision
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cells_are_the_cartesian_product() {
        let g = Grid::parse("mcp.enabled=true,false\nmcp.n_tokens=8,16,32\ndsf.count=2\nseeds=4\nsuite.seeds=1\n").unwrap();
        let cells = g.cells();
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[0], vec![("mcp.enabled".into(), "true".into()), ("mcp.n_tokens".into(), "8".into())]);
        assert_eq!(cells[5][1].1, "32");
        assert_eq!(g.seeds, vec![4]);
        assert_eq!(g.suite.per_scenario, 1);
        let cfg = g.cell_config(&Config::compact(), &cells[4]).unwrap();
        assert!(!cfg.mcp.enabled && cfg.mcp.n_tokens == 16 && cfg.dsf.count == 2);
    }

    #[test]
    fn bad_grids_are_config_errors() {
        assert!(matches!(Grid::parse("nonsense"), Err(Error::Config(_))));
        assert!(matches!(Grid::parse("suite.scenarios=WOBBLE"), Err(Error::Config(_))));
        let g = Grid::parse("mcp.wobble=1,2").unwrap();
        assert!(g.cell_config(&Config::compact(), &g.cells()[0]).is_err());
    }

    #[test]
    fn tiny_grid_runs_and_is_deterministic() {
        let mut base = Config::compact();
        base.backbone.depth = 2;
        base.backbone.d = 16;
        base.backbone.heads = 2;
        base.dsf.count = 1;
        base.dsf.inner = 16;
        base.dsf.state = 4;
        base.head.hidden = 16;
        base.train.steps = 2;
        base.train.sequences = 2;
        base.train.seq_len = 8;
        let grid = Grid::parse("mcp.enabled=false,true\ndsf.enabled=false\nseeds=0\nsuite.seeds=1\nsuite.length=4\nsuite.scenarios=PLAIN\n").unwrap();
        let a = grid_csv(&run_grid(&base, &grid, |_| {}).unwrap());
        let b = grid_csv(&run_grid(&base, &grid, |_| {}).unwrap());
        assert_eq!(a, b);
        assert_eq!(a.lines().count(), 3);
        assert!(a.lines().nth(1).unwrap().starts_with("0,off,off,"));
    }
}
