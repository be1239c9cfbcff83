//! Run configuration: optional values from a TOML file, overridden by
//! command-line flags, resolved against defaults, and echoed back out so a
//! run can be reproduced from its own artifacts.

use anyhow::{bail, Context, Result};
use dke_core::LossKind;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Every knob a run can carry. All fields optional here; [`resolve`] fills
/// the gaps with defaults. Unknown keys in a config file are errors.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub n_vertices: Option<usize>,
    pub shrink_ratio: Option<f64>,
    pub loss: Option<String>,
    pub iterations: Option<usize>,
    pub iou_threshold: Option<f64>,
    pub scenes: Option<usize>,
    pub instances_per_scene: Option<usize>,
    pub canvas_width: Option<usize>,
    pub canvas_height: Option<usize>,
    pub noise: Option<f64>,
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr0: Option<f64>,
    pub binarize_threshold: Option<f64>,
    pub min_area: Option<f64>,
    pub reps: Option<usize>,
}

/// The fully-resolved settings a run actually used. Serializes to the same
/// key set [`FileConfig`] reads, so the echo is itself a valid config file.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Resolved {
    pub seed: u64,
    pub n_vertices: usize,
    pub shrink_ratio: f64,
    pub loss: String,
    pub iterations: usize,
    pub iou_threshold: f64,
    pub scenes: usize,
    pub instances_per_scene: usize,
    pub canvas_width: usize,
    pub canvas_height: usize,
    pub noise: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub binarize_threshold: f64,
    pub min_area: f64,
    pub reps: usize,
}

impl Resolved {
    pub fn loss_kind(&self) -> Result<LossKind> {
        self.loss
            .parse::<LossKind>()
            .map_err(|e| anyhow::anyhow!("{e}"))
    }
}

pub fn load_file(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let cfg: FileConfig =
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    Ok(cfg)
}

/// Merge precedence: command-line flag, then config file, then default.
pub fn resolve(file: &FileConfig, flags: &FileConfig) -> Result<Resolved> {
    macro_rules! pick {
        ($field:ident, $default:expr) => {
            flags.$field.clone().or_else(|| file.$field.clone()).unwrap_or($default)
        };
    }
    let resolved = Resolved {
        seed: pick!(seed, 0),
        n_vertices: pick!(n_vertices, 128),
        shrink_ratio: pick!(shrink_ratio, 0.4),
        loss: pick!(loss, "obgml".to_string()),
        iterations: pick!(iterations, 1),
        iou_threshold: pick!(iou_threshold, 0.5),
        scenes: pick!(scenes, 20),
        instances_per_scene: pick!(instances_per_scene, 2),
        canvas_width: pick!(canvas_width, 256),
        canvas_height: pick!(canvas_height, 256),
        noise: pick!(noise, 1.0),
        steps: pick!(steps, 2000),
        batch_size: pick!(batch_size, 1),
        lr0: pick!(lr0, 2e-4),
        binarize_threshold: pick!(binarize_threshold, 0.5),
        min_area: pick!(min_area, 4.0),
        reps: pick!(reps, 5),
    };
    resolved.loss_kind()?;
    if resolved.iterations == 0 {
        bail!("iterations must be at least 1");
    }
    Ok(resolved)
}

/// Write the resolved settings as `config.toml` in the output directory.
pub fn echo(resolved: &Resolved, out_dir: &Path) -> Result<()> {
    let text = toml::to_string_pretty(resolved).context("serializing resolved config")?;
    std::fs::write(out_dir.join("config.toml"), text).context("writing config echo")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_which_overrides_defaults() {
        let file = FileConfig {
            seed: Some(7),
            scenes: Some(50),
            ..FileConfig::default()
        };
        let flags = FileConfig {
            scenes: Some(10),
            ..FileConfig::default()
        };
        let r = resolve(&file, &flags).unwrap();
        assert_eq!(r.seed, 7);
        assert_eq!(r.scenes, 10);
        assert_eq!(r.n_vertices, 128);
        assert_eq!(r.shrink_ratio, 0.4);
        assert_eq!(r.iou_threshold, 0.5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<FileConfig>("verbosity = 3\n").unwrap_err();
        assert!(err.to_string().contains("verbosity"));
    }

    #[test]
    fn echo_round_trips_through_the_file_loader() {
        let r = resolve(&FileConfig::default(), &FileConfig::default()).unwrap();
        let text = toml::to_string_pretty(&r).unwrap();
        let parsed: FileConfig = toml::from_str(&text).unwrap();
        let r2 = resolve(&parsed, &FileConfig::default()).unwrap();
        assert_eq!(r, r2);
    }

    #[test]
    fn bad_loss_name_fails_resolution() {
        let file = FileConfig {
            loss: Some("cosine".into()),
            ..FileConfig::default()
        };
        assert!(resolve(&file, &FileConfig::default()).is_err());
    }
}
