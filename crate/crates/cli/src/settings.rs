//! Run configuration: the merged config file, command-line overrides and
//! their typed views.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use traverse_core::analysis::{XCorrNorm, DEFAULT_MAX_LAG};
use traverse_core::config::Config;
use traverse_core::data::{generate, load_csv, MissingPolicy, RawDataset, SynthSpec};
use traverse_core::layers::DEFAULT_SLOPE;
use traverse_core::model::{Ablation, ModelConfig};
use traverse_core::stgraph::SpatialGraph;
use traverse_core::training::{SplitRatios, TrainConfig, DEFAULT_MAPE_THRESHOLD};
use traverse_core::{Error, Result};

/// Every recognised key with its default (empty when there is none) and a
/// short description. Bare overrides resolve to the first matching entry.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "base seed for initialization, batch order and dropout"),
    ("model.layers", "3", "number of traverse layers"),
    ("model.hidden", "64", "hidden width"),
    ("model.window", "12", "largest lag each layer attends over"),
    ("model.steps", "12", "input length p"),
    ("model.horizon", "12", "forecast horizon q"),
    ("model.dropout", "0.1", "dropout rate"),
    ("model.slope", "0.2", "leaky-ReLU slope of the attention scores"),
    ("model.ablation", "default", "no_spatial, no_st_traversing, no_attention, no_residual, no_norm or default"),
    ("model.norm_before_residual", "false", "normalize before the residual add"),
    ("model.spatial_first", "false", "stage order under no_st_traversing"),
    ("train.epochs", "50", "training epochs"),
    ("train.lr", "0.001", "Adam learning rate"),
    ("train.weight_decay", "0.00001", "decoupled weight decay"),
    ("train.batch_size", "32", "mini-batch size"),
    ("train.split", "6:2:2", "train:validation:test ratios"),
    ("train.mape_threshold", "0.001", "targets with |y| at or below this are left out of MAPE"),
    ("train.timing", "false", "record wall-clock seconds in the epoch log"),
    ("data.series", "", "series CSV (long or wide)"),
    ("data.edges", "", "edge list, one `u v` pair per line"),
    ("data.synth", "", "generator spec file, used instead of series/edges"),
    ("data.missing", "strict", "strict or forward_fill"),
    ("data.symmetrize", "true", "add the reverse of every edge"),
    ("data.target_feature", "0", "feature index to forecast"),
    ("analysis.k_max", "12", "largest cross-correlation lag"),
    ("analysis.norm", "literal", "literal or overlap normalization"),
    ("analysis.feature", "", "feature to correlate (defaults to the target feature)"),
    ("case.source", "", "source node of the case-study edge"),
    ("case.target", "", "target node of the case-study edge"),
    ("case.sample", "0", "test window shown in the single-window heatmap"),
    ("sweep.axis", "window", "layers, hidden, window, dropout, lr or weight_decay"),
    ("sweep.values", "2,4,6,8,10,12", "comma-separated axis values"),
];

const SYNTH_KEYS: &[&str] = &[
    "nodes",
    "edges",
    "persistence",
    "period",
    "amplitude",
    "noise",
    "length",
    "window",
    "offset",
    "seed",
];

/// Fully qualified name of a key given on the command line.
pub fn resolve_key(key: &str) -> Option<String> {
    if let Some(rest) = key.strip_prefix("synth.") {
        return SYNTH_KEYS.contains(&rest).then(|| key.to_string());
    }
    KEYS.iter()
        .map(|(k, _, _)| *k)
        .find(|k| *k == key || k.rsplit_once('.').is_some_and(|(_, bare)| bare == key))
        .map(str::to_string)
}

fn check_keys(cfg: &Config) -> Result<()> {
    for (k, _) in cfg.entries() {
        let known = KEYS.iter().any(|(name, _, _)| name == k)
            || k.strip_prefix("synth.").is_some_and(|r| SYNTH_KEYS.contains(&r));
        if !known {
            return Err(Error::Config(format!("unknown configuration key `{k}`")));
        }
    }
    Ok(())
}

fn default_of(key: &str) -> &'static str {
    KEYS.iter().find(|(k, _, _)| *k == key).map_or("", |(_, d, _)| d)
}

/// The merged configuration of one command invocation.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub config: Config,
}

impl RunConfig {
    /// Reads the optional config file, inlines a referenced generator spec
    /// and applies overrides in order.
    pub fn assemble(config_path: Option<&Path>, synth_path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let (mut config, base) = match config_path {
            Some(p) => (
                Config::parse(&std::fs::read_to_string(p).map_err(|e| io_context(p, e))?)?,
                p.parent().map(Path::to_path_buf).unwrap_or_default(),
            ),
            None => (Config::new(), PathBuf::new()),
        };
        for (k, v) in overrides {
            let key = resolve_key(k).ok_or_else(|| Error::Config(format!("unknown option `--{k}`")))?;
            config.set(&key, v.clone());
        }
        let synth_file = match synth_path {
            Some(p) => Some(p.to_path_buf()),
            None => config.get("data.synth").filter(|s| !s.is_empty()).map(|s| base.join(s)),
        };
        if let Some(p) = synth_file {
            let spec = Config::parse(&std::fs::read_to_string(&p).map_err(|e| io_context(&p, e))?)?;
            for (k, v) in spec.entries() {
                let key = format!("synth.{k}");
                if config.get(&key).is_none() {
                    config.set(&key, v.clone());
                }
            }
            config.remove("data.synth");
        }
        for key in ["data.series", "data.edges"] {
            if let Some(v) = config.get(key).filter(|v| !v.is_empty()) {
                let full = base.join(v);
                config.set(key, full.to_string_lossy().into_owned());
            }
        }
        check_keys(&config)?;
        Ok(RunConfig { config })
    }

    pub fn from_config(config: Config) -> Result<Self> {
        check_keys(&config)?;
        Ok(RunConfig { config })
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.config.get(key).unwrap_or_else(|| default_of(key));
        raw.parse()
            .map_err(|e| Error::Config(format!("`{key} = {raw}`: {e}")))
    }

    fn opt<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.config.get(key).filter(|v| !v.is_empty()) {
            None => Ok(None),
            Some(_) => self.get(key).map(Some),
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    pub fn with_seed(&self, seed: u64) -> RunConfig {
        let mut c = self.clone();
        c.config.set("seed", seed.to_string());
        c
    }

    /// Model configuration for a dataset of `n_nodes` nodes and `input_dim` features.
    pub fn model(&self, n_nodes: usize, input_dim: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            n_nodes,
            input_dim,
            n_layers: self.get("model.layers")?,
            hidden: self.get("model.hidden")?,
            window: self.get("model.window")?,
            steps: self.get("model.steps")?,
            horizon: self.get("model.horizon")?,
            dropout: self.get("model.dropout")?,
            slope: self.opt("model.slope")?.unwrap_or(DEFAULT_SLOPE),
            ablation: self.get::<Ablation>("model.ablation")?,
            norm_before_residual: self.get("model.norm_before_residual")?,
            spatial_first: self.get("model.spatial_first")?,
            seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            epochs: self.get("train.epochs")?,
            lr: self.get("train.lr")?,
            weight_decay: self.get("train.weight_decay")?,
            batch_size: self.get("train.batch_size")?,
            ratios: self.get::<SplitRatios>("train.split")?,
            seed: self.seed()?,
            target_feature: self.get("data.target_feature")?,
            mape_threshold: self.opt("train.mape_threshold")?.unwrap_or(DEFAULT_MAPE_THRESHOLD),
            timing: self.get("train.timing")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn synth_spec(&self) -> Result<Option<SynthSpec>> {
        let section = self.config.section("synth");
        if section.entries().is_empty() {
            return Ok(None);
        }
        SynthSpec::from_config(&section).map(Some)
    }

    /// Loads or generates the series and its graph.
    pub fn dataset(&self) -> Result<(RawDataset, SpatialGraph)> {
        let symmetrize: bool = self.get("data.symmetrize")?;
        if let Some(spec) = self.synth_spec()? {
            let raw = generate(&spec)?;
            return Ok((raw, spec.graph(symmetrize)?));
        }
        let series: Option<String> = self.opt("data.series")?;
        let edges: Option<String> = self.opt("data.edges")?;
        match (series, edges) {
            (Some(s), Some(e)) => {
                let policy: MissingPolicy = self.get("data.missing")?;
                let (raw, graph, report) = load_csv(Path::new(&s), Path::new(&e), policy, symmetrize)?;
                eprintln!("{report}");
                Ok((raw, graph))
            }
            _ => Err(Error::Config(
                "no data: give --synth <spec>, or data.series and data.edges".into(),
            )),
        }
    }

    pub fn k_max(&self) -> Result<usize> {
        Ok(self.opt("analysis.k_max")?.unwrap_or(DEFAULT_MAX_LAG))
    }

    pub fn xcorr_norm(&self) -> Result<XCorrNorm> {
        match self.get::<String>("analysis.norm")?.as_str() {
            "literal" => Ok(XCorrNorm::Literal),
            "overlap" => Ok(XCorrNorm::Overlap),
            other => Err(Error::Config(format!("unknown cross-correlation normalization `{other}`"))),
        }
    }

    pub fn analysis_feature(&self) -> Result<usize> {
        match self.opt("analysis.feature")? {
            Some(f) => Ok(f),
            None => self.get("data.target_feature"),
        }
    }

    pub fn case_pair(&self) -> Result<Option<(usize, usize)>> {
        Ok(match (self.opt("case.source")?, self.opt("case.target")?) {
            (Some(u), Some(v)) => Some((u, v)),
            _ => None,
        })
    }

    pub fn case_sample(&self) -> Result<usize> {
        self.get("case.sample")
    }

    pub fn sweep(&self) -> Result<(String, Vec<f64>)> {
        let axis: String = self.get("sweep.axis")?;
        let values = self
            .get::<String>("sweep.values")?
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("sweep value `{v}` is not a number")))
            })
            .collect::<Result<Vec<_>>>()?;
        if values.is_empty() {
            return Err(Error::Config("sweep needs at least one value".into()));
        }
        Ok((axis, values))
    }

    /// Hex digest of the command name and rendered config.
    pub fn hash(&self, command: &str) -> String {
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update(b"\n");
        h.update(self.config.to_string().as_bytes());
        let digest = h.finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

fn io_context(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

/// Help text listing every configuration key.
pub fn keys_help() -> String {
    let mut out = String::from("Configuration keys (set in the config file or as --<key> <value>):\n");
    for (k, d, desc) in KEYS {
        let def = if d.is_empty() { String::new() } else { format!(" [default: {d}]") };
        out.push_str(&format!("  {k:<28} {desc}{def}\n"));
    }
    out.push_str("  synth.<key>                  generator settings: ");
    out.push_str(&SYNTH_KEYS.join(", "));
    out.push('\n');
    out
}
