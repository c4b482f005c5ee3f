//! TOML run configuration. Every key is optional; command-line flags win.

use std::path::{Path, PathBuf};

use mvfn_core::data::TripSchema;
use serde::Deserialize;

use crate::Failure;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub graph: GraphSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Raw trip CSV.
    pub trips: Option<PathBuf>,
    /// Node assignment CSV (key map or grid).
    pub nodes: Option<PathBuf>,
    pub schema: Option<TripSchema>,
    pub interval_secs: Option<i64>,
    /// Span bounds as ISO-8601; derived from the records when absent.
    pub start: Option<String>,
    pub end: Option<String>,
    pub val_weeks: Option<usize>,
    pub test_weeks: Option<usize>,
    /// Directory of prepared tensors.
    pub dir: Option<PathBuf>,
    pub stride: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSection {
    pub adjacency: Option<PathBuf>,
    pub k: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub st_layers: Option<usize>,
    pub input_steps: Option<usize>,
    pub output_steps: Option<usize>,
    pub gcn: Option<bool>,
    pub cla: Option<bool>,
    pub mtcn: Option<bool>,
    pub stcn: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub patience: Option<usize>,
    pub clip_norm: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::validation(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: FileConfig = toml::from_str(&text)
            .map_err(|e| Failure::validation(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    /// Makes relative paths relative to the config file instead of the working directory.
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(v) = p {
                if v.is_relative() {
                    *v = base.join(&*v);
                }
            }
        };
        fix(&mut self.data.trips);
        fix(&mut self.data.nodes);
        fix(&mut self.data.dir);
        fix(&mut self.graph.adjacency);
        fix(&mut self.output.dir);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_resolves_paths() {
        let text = r#"
            seed = 3
            [data]
            trips = "trips.csv"
            dir = "/abs/prepared"
            [data.schema]
            pickup_time = "start"
            dropoff_time = "end"
            location = { kind = "node", pickup = "from", dropoff = "to" }
            [model]
            st_layers = 3
            cla = false
            [train]
            epochs = 5
        "#;
        let mut cfg: FileConfig = toml::from_str(text).unwrap();
        cfg.resolve_paths(Path::new("/runs/a"));
        assert_eq!(cfg.seed, Some(3));
        assert_eq!(cfg.data.trips.unwrap(), PathBuf::from("/runs/a/trips.csv"));
        assert_eq!(cfg.data.dir.unwrap(), PathBuf::from("/abs/prepared"));
        assert_eq!(cfg.model.cla, Some(false));
        assert_eq!(cfg.train.epochs, Some(5));
        assert_eq!(cfg.data.schema.unwrap().pickup_time, "start");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<FileConfig>("[train]\nepoch = 3\n").is_err());
    }
}
