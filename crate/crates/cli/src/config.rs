//! Run configuration: profile defaults merged with a config file and
//! command-line overrides, later sources winning.

use std::fs;
use std::path::PathBuf;

use emoclip::training::{apply_key, TrainConfig};
use emoclip::{Error, Result};

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub profile: String,
    pub train: TrainConfig,
    pub train_fraction: f64,
    pub out: PathBuf,
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub synth_per_class: usize,
    pub image: Option<PathBuf>,
    pub text: Option<String>,
    pub gradcheck_samples: usize,
    pub gradcheck_h: f64,
    pub gradcheck_tol: f64,
    pub gradcheck_batch: usize,
}

impl RunConfig {
    pub fn with_profile(profile: &str) -> Result<Self> {
        let train = match profile {
            "desk" => TrainConfig::desk(),
            "paper" => TrainConfig::paper(),
            other => {
                return Err(Error::Usage(format!(
                    "unknown profile \"{other}\" (expected desk or paper)"
                )))
            }
        };
        Ok(RunConfig {
            profile: profile.to_string(),
            train,
            train_fraction: 0.8,
            out: PathBuf::from("out"),
            manifest: None,
            checkpoint: None,
            resume: None,
            synth_per_class: 40,
            image: None,
            text: None,
            gradcheck_samples: 8,
            gradcheck_h: 1e-6,
            gradcheck_tol: 1e-5,
            gradcheck_batch: 2,
        })
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("cannot parse {key} value \"{value}\"")))
        }
        match key {
            "profile" => {} // applied in the baseline pass
            "train_fraction" => self.train_fraction = parse(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "manifest" => self.manifest = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "resume" => self.resume = Some(PathBuf::from(value)),
            "synth_per_class" => self.synth_per_class = parse(key, value)?,
            "image" => self.image = Some(PathBuf::from(value)),
            "text" => self.text = Some(value.to_string()),
            "gradcheck_samples" => self.gradcheck_samples = parse(key, value)?,
            "gradcheck_h" => self.gradcheck_h = parse(key, value)?,
            "gradcheck_tol" => self.gradcheck_tol = parse(key, value)?,
            "gradcheck_batch" => self.gradcheck_batch = parse(key, value)?,
            other => apply_key(&mut self.train, other, value)?,
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must be in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if self.gradcheck_h <= 0.0 || self.gradcheck_tol <= 0.0 || self.gradcheck_batch < 2 {
            return Err(Error::Config(
                "gradcheck_h and gradcheck_tol must be positive, gradcheck_batch at least 2".into(),
            ));
        }
        Ok(())
    }

    /// The effective configuration, parseable by [`parse_config`] and
    /// sufficient to reproduce the run.
    pub fn render(&self) -> String {
        let mut s = format!("profile = {}\n", self.profile);
        s.push_str(&self.train.config_lines());
        s.push_str(&format!("train_fraction = {}\n", self.train_fraction));
        s.push_str(&format!("out = {}\n", self.out.display()));
        s.push_str(&format!("synth_per_class = {}\n", self.synth_per_class));
        for (key, path) in [
            ("manifest", &self.manifest),
            ("checkpoint", &self.checkpoint),
            ("resume", &self.resume),
            ("image", &self.image),
        ] {
            if let Some(p) = path {
                s.push_str(&format!("{key} = {}\n", p.display()));
            }
        }
        if let Some(t) = &self.text {
            s.push_str(&format!("text = {t}\n"));
        }
        s.push_str(&format!("gradcheck_samples = {}\n", self.gradcheck_samples));
        s.push_str(&format!("gradcheck_h = {}\n", self.gradcheck_h));
        s.push_str(&format!("gradcheck_tol = {}\n", self.gradcheck_tol));
        s.push_str(&format!("gradcheck_batch = {}\n", self.gradcheck_batch));
        s
    }
}

fn parse_line(line: &str, line_no: usize) -> Result<Option<(String, String)>> {
    let line = line.trim();
    if line.is_empty() || line.starts_with('#') {
        return Ok(None);
    }
    let (key, value) = line.split_once('=').ok_or_else(|| Error::Usage(format!(
        "config line {line_no} is not key = value: \"{line}\""
    )))?;
    Ok(Some((key.trim().to_string(), value.trim().to_string())))
}

/// Merges defaults, the optional config file, and `key=value` override
/// arguments, in that order.
pub fn parse_config(file: Option<&PathBuf>, overrides: &[String]) -> Result<RunConfig> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    if let Some(path) = file {
        let content = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                Error::Usage(format!("config file not found: {}", path.display()))
            }
            _ => Error::io(path, e),
        })?;
        for (i, line) in content.lines().enumerate() {
            if let Some(pair) = parse_line(line, i + 1)? {
                pairs.push(pair);
            }
        }
    }
    for (i, arg) in overrides.iter().enumerate() {
        match parse_line(arg, i + 1)? {
            Some(pair) => pairs.push(pair),
            None => return Err(Error::Usage(format!("empty override argument {i}"))),
        }
    }

    let profile = pairs
        .iter()
        .rev()
        .find(|(k, _)| k == "profile")
        .map(|(_, v)| v.as_str())
        .unwrap_or("desk");
    let mut cfg = RunConfig::with_profile(profile)?;
    for (key, value) in &pairs {
        cfg.apply(key, value)?;
    }
    Ok(cfg)
}
