//! Named presets and multi-seed comparisons.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::{AblationFlags, RunConfig};
use crate::error::{Error, Result};
use crate::stream::ImageSource;
use crate::trainer::{run_stream, RunOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Table {
    /// Component study.
    Components,
    /// Distillation study.
    Distillation,
    /// Pool size.
    PoolSize,
    /// Dynamic versus fixed SSL weight.
    DynamicWeight,
}

impl Table {
    pub const ALL: [Table; 4] = [
        Table::Components,
        Table::Distillation,
        Table::PoolSize,
        Table::DynamicWeight,
    ];

    pub fn number(self) -> usize {
        match self {
            Table::Components => 1,
            Table::Distillation => 2,
            Table::PoolSize => 3,
            Table::DynamicWeight => 4,
        }
    }
}

impl FromStr for Table {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(Table::Components),
            "2" => Ok(Table::Distillation),
            "3" => Ok(Table::PoolSize),
            "4" => Ok(Table::DynamicWeight),
            _ => Err(Error::Config(format!("unknown table `{s}` (expected 1, 2, 3 or 4)"))),
        }
    }
}

impl fmt::Display for Table {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

#[derive(Clone, Debug)]
pub struct Preset {
    pub name: String,
    pub config: RunConfig,
}

fn flags(ssl: bool, fkd: bool, lkd: bool, lc: bool, der: bool, ema: bool, multi: bool) -> AblationFlags {
    AblationFlags {
        use_ace: true,
        use_ssl: ssl,
        use_feature_kd: fkd,
        use_logit_kd: lkd,
        use_lc: lc,
        use_der: der,
        use_ema: ema,
        use_multi_model: multi,
    }
}

/// The flag assignment of a named preset, or `None` for an unknown name.
pub fn preset_flags(name: &str) -> Option<AblationFlags> {
    let f = match name {
        "ft" => AblationFlags {
            use_ace: false,
            ..AblationFlags::none()
        },
        "baseline" => flags(false, false, false, true, true, false, false),
        "baseline+ssl" => flags(true, false, false, true, true, false, false),
        "baseline+mlkd" => flags(false, true, true, true, true, true, true),
        "full" => AblationFlags::all(),
        "fkd" => flags(true, true, false, true, true, false, false),
        "fkd+ema" => flags(true, true, false, true, true, true, false),
        "fkd+ema+clkd" => flags(true, true, true, true, true, true, false),
        "fkd+ema+clkd+mpm" => AblationFlags::all(),
        _ => return None,
    };
    Some(f)
}

pub const PRESET_NAMES: [&str; 9] = [
    "ft",
    "baseline",
    "baseline+ssl",
    "baseline+mlkd",
    "full",
    "fkd",
    "fkd+ema",
    "fkd+ema+clkd",
    "fkd+ema+clkd+mpm",
];

/// `base` with the named preset's flags applied.
pub fn apply_preset(base: &RunConfig, name: &str) -> Result<RunConfig> {
    let flags = preset_flags(name).ok_or_else(|| {
        Error::Config(format!(
            "unknown preset `{name}`; valid presets: {}",
            PRESET_NAMES.join(", ")
        ))
    })?;
    Ok(RunConfig { flags, ..base.clone() })
}

/// The rows of `table`, each derived from `base`.
pub fn table_presets(table: Table, base: &RunConfig) -> Result<Vec<Preset>> {
    let named = |names: &[&str]| -> Result<Vec<Preset>> {
        names
            .iter()
            .map(|&n| {
                Ok(Preset {
                    name: n.to_string(),
                    config: apply_preset(base, n)?,
                })
            })
            .collect()
    };
    match table {
        Table::Components => named(&["ft", "baseline", "baseline+ssl", "baseline+mlkd", "full"]),
        Table::Distillation => named(&["fkd", "fkd+ema", "fkd+ema+clkd", "fkd+ema+clkd+mpm"]),
        Table::PoolSize => {
            let full = apply_preset(base, "full")?;
            Ok((1..=4)
                .map(|k| Preset {
                    name: format!("full/K={k}"),
                    config: RunConfig {
                        pool_size: k,
                        ..full.clone()
                    },
                })
                .collect())
        }
        Table::DynamicWeight => {
            let full = apply_preset(base, "full")?;
            let mut fixed = full.clone();
            fixed.schedule.dynamic_ssl = false;
            Ok(vec![
                Preset {
                    name: "dynamic".into(),
                    config: full,
                },
                Preset {
                    name: "fixed".into(),
                    config: fixed,
                },
            ])
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PresetResult {
    pub name: String,
    /// Final accuracy per seed, in seed order.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
}

impl PresetResult {
    fn new(name: String, accuracies: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&accuracies);
        Self {
            name,
            accuracies,
            mean,
            std,
        }
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Root mean of the two variances.
pub fn pooled_std(a: &PresetResult, b: &PresetResult) -> f64 {
    ((a.std * a.std + b.std * b.std) / 2.0).sqrt()
}

#[derive(Clone, Debug, Serialize)]
pub struct Verdict {
    pub claim: String,
    pub holds: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub table: usize,
    pub seeds: Vec<u64>,
    pub results: Vec<PresetResult>,
    pub verdicts: Vec<Verdict>,
}

impl AblationReport {
    pub fn result(&self, name: &str) -> Option<&PresetResult> {
        self.results.iter().find(|r| r.name == name)
    }

    pub fn ordering_holds(&self) -> bool {
        self.verdicts.iter().all(|v| v.holds)
    }
}

impl fmt::Display for AblationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "table {} over seeds {:?}", self.table, self.seeds)?;
        for r in &self.results {
            writeln!(f, "  {:<18} {:.4} ± {:.4}", r.name, r.mean, r.std)?;
        }
        for v in &self.verdicts {
            writeln!(f, "  [{}] {}", if v.holds { "ok" } else { "FAIL" }, v.claim)?;
        }
        write!(
            f,
            "ordering {}",
            if self.ordering_holds() { "holds" } else { "violated" }
        )
    }
}

fn verdicts(table: Table, results: &[PresetResult]) -> Vec<Verdict> {
    let get = |n: &str| results.iter().find(|r| r.name == n).expect("preset present");
    let lt = |a: &str, b: &str| Verdict {
        claim: format!("{a} < {b}"),
        holds: get(a).mean < get(b).mean,
    };
    let le = |a: &str, b: &str| Verdict {
        claim: format!("{a} <= {b}"),
        holds: get(a).mean <= get(b).mean,
    };
    match table {
        Table::Components => {
            let (ft, full) = (get("ft"), get("full"));
            let spread = pooled_std(ft, full);
            vec![
                lt("ft", "baseline"),
                lt("baseline", "baseline+mlkd"),
                le("baseline+mlkd", "full"),
                lt("baseline", "baseline+ssl"),
                Verdict {
                    claim: format!("full - ft = {:.4} > 2 x pooled std {:.4}", full.mean - ft.mean, spread),
                    holds: full.mean - ft.mean > 2.0 * spread,
                },
            ]
        }
        Table::Distillation => vec![
            le("fkd", "fkd+ema"),
            le("fkd+ema", "fkd+ema+clkd"),
            le("fkd+ema+clkd", "fkd+ema+clkd+mpm"),
        ],
        Table::PoolSize => vec![le("full/K=1", "full/K=3")],
        Table::DynamicWeight => {
            let (dynamic, fixed) = (get("dynamic"), get("fixed"));
            let spread = pooled_std(dynamic, fixed);
            vec![Verdict {
                claim: format!(
                    "dynamic {:.4} >= fixed {:.4} - 0.5 x pooled std {:.4}",
                    dynamic.mean, fixed.mean, spread
                ),
                holds: dynamic.mean >= fixed.mean - 0.5 * spread,
            }]
        }
    }
}

/// Runs every preset of `table` over `seeds` in parallel.
pub fn ablate(table: Table, base: &RunConfig, seeds: &[u64], source: &ImageSource) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let presets = table_presets(table, base)?;
    let jobs: Vec<(usize, u64)> = (0..presets.len())
        .flat_map(|p| seeds.iter().map(move |&s| (p, s)))
        .collect();
    let finals: Vec<f64> = jobs
        .par_iter()
        .map(|&(p, seed)| {
            let cfg = presets[p].config.clone().with_seed(seed);
            run_stream::<f64>(&cfg, source, &RunOptions::default()).map(|m| m.final_accuracy)
        })
        .collect::<Result<_>>()?;
    let results: Vec<PresetResult> = presets
        .iter()
        .zip(finals.chunks(seeds.len()))
        .map(|(p, accs)| PresetResult::new(p.name.clone(), accs.to_vec()))
        .collect();
    Ok(AblationReport {
        table: table.number(),
        seeds: seeds.to_vec(),
        verdicts: verdicts(table, &results),
        results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_differ_from_full_only_in_declared_keys() {
        let base = RunConfig::default();
        let full = apply_preset(&base, "full").unwrap();
        for table in Table::ALL {
            for p in table_presets(table, &base).unwrap() {
                for (key, _, _) in full.diff(&p.config) {
                    assert!(
                        key.starts_with("flags.") || key == "pool.size" || key == "schedule.dynamic_ssl",
                        "{} changes {key}",
                        p.name
                    );
                }
            }
        }
    }

    #[test]
    fn table_shapes() {
        let base = RunConfig::default();
        let sizes: Vec<usize> = Table::ALL
            .iter()
            .map(|&t| table_presets(t, &base).unwrap().len())
            .collect();
        assert_eq!(sizes, [5, 4, 4, 2]);
        assert!("5".parse::<Table>().is_err());
        assert!(apply_preset(&base, "nope").unwrap_err().is_config());
    }

    #[test]
    fn mean_std_single_seed() {
        assert_eq!(mean_std(&[0.3]), (0.3, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
    }
}
