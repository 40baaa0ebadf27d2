//! Latency lookup table: averaged per-configuration operator timings
//! keyed by (operator, resolution row, in-width index, out-width index).

use crate::error::{DenasError, Result};
use crate::graph::Graph;
use crate::supernet::PartSpec;
use crate::tensor::TensorData;
use crate::zoo::{menu_width, OperatorInstance, OPERATOR_MENU, WIDTH_MENU_LEN};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LatencyMeta {
    pub reps: usize,
    pub warmups: usize,
    pub host: String,
    pub input_shape: [usize; 4],
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LatencyEntry {
    pub op: String,
    pub row: usize,
    pub win: usize,
    pub wout: usize,
    pub mean_s: f64,
}

/// Immutable table of mean per-operator inference times.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LatencyTable {
    pub meta: LatencyMeta,
    pub entries: Vec<LatencyEntry>,
    #[serde(skip)]
    index: HashMap<(String, usize, usize, usize), f64>,
}

fn entry_key(e: &LatencyEntry) -> (String, usize, usize, usize) {
    (e.op.clone(), e.row, e.win, e.wout)
}

impl LatencyTable {
    pub fn from_entries(meta: LatencyMeta, mut entries: Vec<LatencyEntry>) -> Result<Self> {
        if entries.iter().any(|e| !(e.mean_s > 0.0)) {
            return Err(DenasError::arg("latency_table", "non-positive mean time"));
        }
        entries.sort_by(|a, b| entry_key(a).cmp(&entry_key(b)));
        let index = entries.iter().map(|e| (entry_key(e), e.mean_s)).collect();
        Ok(LatencyTable {
            meta,
            entries,
            index,
        })
    }

    /// Synthetic table from a cost function, for tests and rigged runs.
    pub fn synthetic(spec: &PartSpec, f: impl Fn(&str, usize, usize, usize) -> f64) -> Result<Self> {
        let mut entries = vec![];
        for kind in OPERATOR_MENU {
            for row in 0..spec.rows {
                for win in 0..WIDTH_MENU_LEN {
                    for wout in 0..WIDTH_MENU_LEN {
                        entries.push(LatencyEntry {
                            op: kind.name().to_string(),
                            row,
                            win,
                            wout,
                            mean_s: f(kind.name(), row, win, wout),
                        });
                    }
                }
            }
        }
        LatencyTable::from_entries(
            LatencyMeta {
                reps: 0,
                warmups: 0,
                host: "synthetic".into(),
                input_shape: [0, 0, 0, 0],
            },
            entries,
        )
    }

    pub fn get(&self, op: &str, row: usize, win: usize, wout: usize) -> Result<f64> {
        self.index
            .get(&(op.to_string(), row, win, wout))
            .copied()
            .ok_or_else(|| {
                DenasError::MissingLatencyKey(format!("({op}, row {row}, win {win}, wout {wout})"))
            })
    }

    /// Mean time of operator `op` at `row`, marginalized uniformly over
    /// both width indices.
    pub fn op_mean(&self, op: &str, row: usize) -> Result<f64> {
        let mut s = 0.0;
        for win in 0..WIDTH_MENU_LEN {
            for wout in 0..WIDTH_MENU_LEN {
                s += self.get(op, row, win, wout)?;
            }
        }
        Ok(s / (WIDTH_MENU_LEN * WIDTH_MENU_LEN) as f64)
    }

    /// Mean time of out-width index `wout` at `row`, marginalized over
    /// operators and in-widths.
    pub fn width_mean(&self, row: usize, wout: usize) -> Result<f64> {
        let mut s = 0.0;
        for kind in OPERATOR_MENU {
            for win in 0..WIDTH_MENU_LEN {
                s += self.get(kind.name(), row, win, wout)?;
            }
        }
        Ok(s / (OPERATOR_MENU.len() * WIDTH_MENU_LEN) as f64)
    }

    /// Mean time over everything at `row`.
    pub fn row_mean(&self, row: usize) -> Result<f64> {
        let mut s = 0.0;
        for kind in OPERATOR_MENU {
            s += self.op_mean(kind.name(), row)?;
        }
        Ok(s / OPERATOR_MENU.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        let mut t: LatencyTable = serde_json::from_str(&raw)?;
        t.index = t.entries.iter().map(|e| (entry_key(e), e.mean_s)).collect();
        if t.index.len() != t.entries.len() {
            return Err(DenasError::arg("latency_table", "duplicate keys"));
        }
        Ok(t)
    }
}

/// Smallest observable monotonic-clock increment, in seconds.
fn timer_granularity() -> f64 {
    let mut min_delta = f64::INFINITY;
    for _ in 0..64 {
        let t0 = Instant::now();
        let mut t1 = Instant::now();
        while t1 == t0 {
            t1 = Instant::now();
        }
        min_delta = min_delta.min((t1 - t0).as_secs_f64());
    }
    min_delta
}

/// Time every (operator, row, in-width, out-width) configuration of the
/// part spec: `warmups` untimed then `reps` timed forward applications on
/// a fixed random input. Strictly serial.
pub fn build_latency_table(
    spec: &PartSpec,
    reps: usize,
    warmups: usize,
    input_hw: usize,
) -> Result<LatencyTable> {
    if reps < 1 {
        return Err(DenasError::arg("build_latency_table", "reps must be >= 1"));
    }
    spec.validate()?;
    let granularity = timer_granularity();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut entries = vec![];
    for row in 0..spec.rows {
        let full = spec.row_width(row);
        let hw = (input_hw >> row).max(4);
        for kind in OPERATOR_MENU {
            let op = OperatorInstance::new(kind, full, false, "lut", &mut rng)?;
            for win_i in 0..WIDTH_MENU_LEN {
                for wout_i in 0..WIDTH_MENU_LEN {
                    let w_in = menu_width(full, win_i);
                    let w_out = menu_width(full, wout_i);
                    let x = TensorData::random([1, w_in, hw, hw], 1.0, &mut rng);
                    let run = |x: &TensorData| -> Result<()> {
                        let mut g = Graph::new();
                        let xv = g.input(x.clone())?;
                        op.apply(&mut g, xv, w_in, w_out)?;
                        Ok(())
                    };
                    for _ in 0..warmups {
                        run(&x)?;
                    }
                    let t0 = Instant::now();
                    for _ in 0..reps {
                        run(&x)?;
                    }
                    let mean_s = t0.elapsed().as_secs_f64() / reps as f64;
                    if mean_s < 10.0 * granularity {
                        return Err(DenasError::TimerResolution(format!(
                            "mean {mean_s:.3e}s below 10x timer granularity \
                             {granularity:.3e}s; use a larger input"
                        )));
                    }
                    entries.push(LatencyEntry {
                        op: kind.name().to_string(),
                        row,
                        win: win_i,
                        wout: wout_i,
                        mean_s,
                    });
                }
            }
        }
    }
    LatencyTable::from_entries(
        LatencyMeta {
            reps,
            warmups,
            host: format!("{} {}", std::env::consts::OS, std::env::consts::ARCH),
            input_shape: [1, spec.base_width, input_hw, input_hw],
        },
        entries,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_spec() -> PartSpec {
        PartSpec {
            rows: 2,
            cells_per_row: 2,
            base_width: 8,
            in_channels: 8,
            seed: 3,
        }
    }

    #[test]
    fn key_space_is_fully_covered() {
        let spec = tiny_spec();
        let t = build_latency_table(&spec, 1, 0, 16).unwrap();
        assert_eq!(t.entries.len(), 8 * spec.rows * 5 * 5);
        for kind in OPERATOR_MENU {
            for row in 0..spec.rows {
                for win in 0..5 {
                    for wout in 0..5 {
                        assert!(t.get(kind.name(), row, win, wout).unwrap() > 0.0);
                    }
                }
            }
        }
        assert_eq!(t.meta.reps, 1);
    }

    #[test]
    fn skip_is_cheapest_kind() {
        let t = build_latency_table(&tiny_spec(), 3, 1, 16).unwrap();
        for row in 0..2 {
            let skip = t.op_mean("skip", row).unwrap();
            for kind in OPERATOR_MENU {
                if kind.name() != "skip" {
                    assert!(
                        skip < t.op_mean(kind.name(), row).unwrap(),
                        "skip not cheapest at row {row} vs {}",
                        kind.name()
                    );
                }
            }
        }
    }

    #[test]
    fn repeat_builds_agree_within_tolerance() {
        let spec = tiny_spec();
        let a = build_latency_table(&spec, 3, 1, 16).unwrap();
        let b = build_latency_table(&spec, 3, 1, 16).unwrap();
        let mut devs: Vec<f64> = a
            .entries
            .iter()
            .zip(&b.entries)
            .map(|(ea, eb)| (ea.mean_s - eb.mean_s).abs() / ea.mean_s.max(eb.mean_s))
            .collect();
        devs.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let median = devs[devs.len() / 2];
        assert!(median <= 0.20, "median relative deviation {median}");
    }

    #[test]
    fn entries_sorted_and_roundtrip() {
        let t = LatencyTable::synthetic(&tiny_spec(), |op, row, win, wout| {
            1e-6 * (1 + row + win + wout) as f64 + if op == "skip" { 0.0 } else { 1e-6 }
        })
        .unwrap();
        for w in t.entries.windows(2) {
            assert!(entry_key(&w[0]) <= entry_key(&w[1]));
        }
        let dir = tempdir().unwrap();
        let path = dir.path().join("lut.json");
        t.save(&path).unwrap();
        let t2 = LatencyTable::load(&path).unwrap();
        assert_eq!(t.entries, t2.entries);
        assert_eq!(t.meta, t2.meta);
        assert_eq!(t2.get("skip", 0, 0, 0).unwrap(), 1e-6);
        assert!(matches!(
            t2.get("skip", 9, 0, 0),
            Err(DenasError::MissingLatencyKey(_))
        ));
    }

    #[test]
    fn rejects_bad_entries() {
        let meta = LatencyMeta {
            reps: 1,
            warmups: 0,
            host: "h".into(),
            input_shape: [1, 1, 1, 1],
        };
        let bad = vec![LatencyEntry {
            op: "skip".into(),
            row: 0,
            win: 0,
            wout: 0,
            mean_s: 0.0,
        }];
        assert!(LatencyTable::from_entries(meta, bad).is_err());
    }
}
