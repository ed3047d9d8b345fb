//! The `fit`, `predict`, `simulate`, and `compare` subcommands.
//!
//! Every command is a deterministic function of its input files, the run
//! configuration, and the seed.  Output files are written atomically, so an
//! interrupted run never leaves a half-written table behind.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use stordinal::design::{build_design, ControlEvent, ModelSpec, Observation, Variant};
use stordinal::inference::{fit, predict, FitResult, PredictionRow};
use stordinal::simulate::{simulate_dataset, GroundTruth};
use stordinal::{Error, Result};

use crate::config::{config_hash, RunConfig};
use crate::data;
use crate::output::{atomic_write, fmt6};

/// Options shared by every subcommand, with flag overrides already parsed.
pub struct Common {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// Everything `predict` needs to trust a previous fit: the seed it used,
/// the hash of (model, data) it was built from, and the fit itself.
#[derive(Debug, Serialize, Deserialize)]
pub struct FitArchive {
    pub seed: u64,
    pub config_hash: String,
    pub fit: FitResult,
}

fn out_dir(common: &Common, cfg: &RunConfig) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("."))
}

fn variant_label(variant: Variant) -> &'static str {
    match variant {
        Variant::M1 => "M1",
        Variant::M2 => "M2",
        Variant::M3 => "M3",
    }
}

fn parse_variant(raw: &str) -> Result<Variant> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "m1" => Ok(Variant::M1),
        "m2" => Ok(Variant::M2),
        "m3" => Ok(Variant::M3),
        _ => Err(Error::invalid(format!(
            "unknown model variant {raw:?} (expected M1, M2, or M3)"
        ))),
    }
}

/// Loads and parses the observation and control files, returning them
/// together with the configuration hash that ties a fit archive to its
/// inputs.
fn load_fit_inputs(
    cfg: &RunConfig,
) -> Result<(ModelSpec, Vec<Observation>, Vec<ControlEvent>, String)> {
    let spec = cfg.model_spec()?;
    let obs_path = cfg
        .observations
        .as_ref()
        .ok_or_else(|| Error::invalid("config field observations is required"))?;
    let obs_bytes = data::read_bytes(obs_path)?;
    let observations = data::parse_observations(&obs_bytes, &obs_path.display().to_string())?;
    let (ctl_bytes, events) = match &cfg.controls {
        Some(path) => {
            let bytes = data::read_bytes(path)?;
            let events = data::parse_controls(&bytes, &path.display().to_string())?;
            (bytes, events)
        }
        None => (Vec::new(), Vec::new()),
    };
    let hash = config_hash(&spec, &obs_bytes, &ctl_bytes);
    Ok((spec, observations, events, hash))
}

fn write_summary(path: &Path, result: &FitResult) -> Result<()> {
    let mut text = String::from("parameter,q0.025,q0.50,q0.975\n");
    for s in result
        .coefficient_summary
        .iter()
        .chain(result.hyper_summary.iter())
    {
        text.push_str(&format!(
            "{},{},{},{}\n",
            s.name,
            fmt6(s.q025),
            fmt6(s.q50),
            fmt6(s.q975)
        ));
    }
    atomic_write(path, text.as_bytes())
}

fn write_dic(path: &Path, rows: &[(String, f64)]) -> Result<()> {
    let mut text = String::from("model,DIC\n");
    for (label, dic) in rows {
        text.push_str(&format!("{label},{}\n", fmt6(*dic)));
    }
    atomic_write(path, text.as_bytes())
}

fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let mut text = String::from("x_km,y_km,year,category,q0.05,q0.50,q0.95\n");
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            fmt6(r.x_km),
            fmt6(r.y_km),
            r.year,
            r.category,
            fmt6(r.q05),
            fmt6(r.q50),
            fmt6(r.q95)
        ));
    }
    atomic_write(path, text.as_bytes())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

pub fn cmd_fit(common: &Common) -> Result<()> {
    let cfg = RunConfig::load(&common.config)?;
    let seed = common.seed.unwrap_or(cfg.seed);
    let out = out_dir(common, &cfg);
    let (spec, observations, events, hash) = load_fit_inputs(&cfg)?;
    let design = build_design(&observations, &events, &spec)?;
    let result = fit(&design, &cfg.fit_config(seed))?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    write_summary(&out.join("summary.csv"), &result)?;
    write_dic(
        &out.join("dic.csv"),
        &[(variant_label(result.variant).to_string(), result.dic.dic)],
    )?;
    let archive = FitArchive {
        seed,
        config_hash: hash,
        fit: result,
    };
    write_json(&out.join("fit.json"), &archive)
}

pub fn cmd_predict(common: &Common, archive_path: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(&common.config)?;
    let seed = common.seed.unwrap_or(cfg.seed);
    let out = out_dir(common, &cfg);
    let (spec, observations, events, hash) = load_fit_inputs(&cfg)?;
    let grid_path = cfg
        .grid
        .as_ref()
        .ok_or_else(|| Error::invalid("config field grid is required to predict"))?;
    let targets = data::parse_grid(
        &data::read_bytes(grid_path)?,
        &grid_path.display().to_string(),
    )?;

    let archive_path = archive_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.join("fit.json"));
    let archive: FitArchive = serde_json::from_slice(&data::read_bytes(&archive_path)?)
        .map_err(|e| Error::invalid(format!("fit archive {}: {e}", archive_path.display())))?;
    if archive.config_hash != hash {
        return Err(Error::invalid(
            "fit archive does not match the configuration (model or data changed since the fit)",
        ));
    }

    let design = build_design(&observations, &events, &spec)?;
    let set = predict(&design, &archive.fit, &targets, cfg.inference.samples, seed)?;
    eprintln!(
        "prediction audit: max |sum(pi) - 1| = {:.3e}",
        set.max_prob_sum_error
    );
    if !(set.max_prob_sum_error < 1e-10) {
        return Err(Error::numerical(format!(
            "per-draw category probabilities failed the normalisation audit: \
             max |sum(pi) - 1| = {:.3e}",
            set.max_prob_sum_error
        )));
    }
    write_predictions(&out.join("predictions.csv"), &set.rows)
}

#[derive(Serialize)]
struct TruthArchive<'a> {
    truth: &'a GroundTruth,
    /// Latent field values by year index, then knot.
    field: &'a [Vec<f64>],
}

pub fn cmd_simulate(common: &Common) -> Result<()> {
    let cfg = RunConfig::load(&common.config)?;
    let out = out_dir(common, &cfg);
    let mut truth = cfg
        .truth
        .ok_or_else(|| Error::invalid("config field truth is required to simulate"))?;
    if let Some(seed) = common.seed {
        truth.seed = seed;
    }
    let simulated = simulate_dataset(&truth)?;
    data::write_observations(&out.join("observations.csv"), &simulated.observations)?;
    data::write_controls(&out.join("controls.csv"), &simulated.events)?;
    write_json(
        &out.join("truth.json"),
        &TruthArchive {
            truth: &truth,
            field: &simulated.field,
        },
    )
}

pub fn cmd_compare(common: &Common, variants: &[String]) -> Result<()> {
    if variants.len() < 2 {
        return Err(Error::invalid(
            "compare needs at least two --variants, e.g. --variants M1,M3",
        ));
    }
    let requested: Vec<Variant> = variants
        .iter()
        .map(|v| parse_variant(v))
        .collect::<Result<_>>()?;

    let cfg = RunConfig::load(&common.config)?;
    let seed = common.seed.unwrap_or(cfg.seed);
    let out = out_dir(common, &cfg);
    let (base_spec, observations, events, _) = load_fit_inputs(&cfg)?;

    let mut rows: Vec<(String, f64)> = Vec::new();
    for variant in requested {
        let mut spec = base_spec.clone();
        spec.variant = variant;
        let attempt = build_design(&observations, &events, &spec)
            .and_then(|design| fit(&design, &cfg.fit_config(seed)));
        match attempt {
            Ok(result) => {
                for w in &result.warnings {
                    eprintln!("warning: {}: {w}", variant_label(variant));
                }
                rows.push((variant_label(variant).to_string(), result.dic.dic));
            }
            Err(e) => {
                rows.sort_by(|a, b| a.1.total_cmp(&b.1));
                write_dic(&out.join("dic.csv"), &rows)?;
                eprintln!(
                    "warning: variant {} failed; dic.csv holds partial results \
                     ({} of {} variants)",
                    variant_label(variant),
                    rows.len(),
                    variants.len()
                );
                return Err(e);
            }
        }
    }
    rows.sort_by(|a, b| a.1.total_cmp(&b.1));
    write_dic(&out.join("dic.csv"), &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_parsing_is_case_insensitive() {
        assert_eq!(parse_variant("M1").unwrap(), Variant::M1);
        assert_eq!(parse_variant("m2").unwrap(), Variant::M2);
        assert_eq!(parse_variant(" m3 ").unwrap(), Variant::M3);
        assert!(parse_variant("M4").is_err());
        assert!(parse_variant("").is_err());
    }

    #[test]
    fn output_directory_prefers_flag_then_config() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"out": "from_config"}"#).unwrap();
        let no_out: RunConfig = serde_json::from_str("{}").unwrap();
        let flag = Common {
            config: PathBuf::from("c.json"),
            seed: None,
            out: Some(PathBuf::from("from_flag")),
        };
        let no_flag = Common {
            config: PathBuf::from("c.json"),
            seed: None,
            out: None,
        };
        assert_eq!(out_dir(&flag, &cfg), PathBuf::from("from_flag"));
        assert_eq!(out_dir(&no_flag, &cfg), PathBuf::from("from_config"));
        assert_eq!(out_dir(&no_flag, &no_out), PathBuf::from("."));
    }

    #[test]
    fn dic_table_formats_six_significant_digits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dic.csv");
        write_dic(
            &path,
            &[("M3".to_string(), 1234.56789), ("M1".to_string(), 1301.0)],
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "model,DIC\nM3,1234.57\nM1,1301.00\n");
    }
}
