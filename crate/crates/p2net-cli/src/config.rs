//! Plain-text `key=value` configuration with `[section]` headers. Every key
//! can be overridden on the command line with `--set section.key=value`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

#[derive(Debug, Clone, Default)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

impl Config {
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Config> {
        let mut entries = BTreeMap::new();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key=value", lineno + 1))?;
            let full = if section.is_empty() {
                key.trim().to_string()
            } else {
                format!("{section}.{}", key.trim())
            };
            entries.insert(full, value.trim().to_string());
        }
        Ok(Config { entries })
    }

    /// Applies `section.key=value` overrides.
    pub fn apply_overrides(&mut self, sets: &[String]) -> Result<()> {
        for set in sets {
            let (key, value) = set
                .split_once('=')
                .ok_or_else(|| anyhow!("override {set:?} is not section.key=value"))?;
            self.entries
                .insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.entries.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse::<T>()
                .map_err(|_| anyhow!("config key {key}: cannot parse {raw:?}")),
        }
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| anyhow!("config key {key} is required"))
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        Ok(PathBuf::from(self.require(key)?))
    }

    /// Comma-separated u16 list, e.g. ignored class ids.
    pub fn get_u16_list(&self, key: &str, default: &[u16]) -> Result<Vec<u16>> {
        match self.entries.get(key) {
            None => Ok(default.to_vec()),
            Some(raw) if raw.trim().is_empty() => Ok(Vec::new()),
            Some(raw) => raw
                .split(',')
                .map(|tok| {
                    tok.trim()
                        .parse::<u16>()
                        .map_err(|_| anyhow!("config key {key}: bad class id {tok:?}"))
                })
                .collect(),
        }
    }

    /// The fully resolved configuration, echoed at the start of every run.
    pub fn resolved_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}

/// Scene settings from the `[scene]` section over the library defaults.
pub fn scene_config(cfg: &Config, seed: u64) -> Result<p2net::synth::SceneConfig> {
    let d = p2net::synth::SceneConfig::default();
    let mut scene = p2net::synth::SceneConfig {
        extent: cfg.get_or("scene.extent", d.extent)?,
        buildings: cfg.get_or("scene.buildings", d.buildings)?,
        cars: cfg.get_or("scene.cars", d.cars)?,
        poles: cfg.get_or("scene.poles", d.poles)?,
        pedestrians: cfg.get_or("scene.pedestrians", d.pedestrians)?,
        car_speed: cfg.get_or("scene.car_speed", d.car_speed)?,
        pedestrian_speed: cfg.get_or("scene.pedestrian_speed", d.pedestrian_speed)?,
        frames: cfg.get_or("scene.frames", d.frames)?,
        points_per_frame: cfg.get_or("scene.points_per_frame", d.points_per_frame)?,
        sensor_height: cfg.get_or("scene.sensor_height", d.sensor_height)?,
        sensor_speed: cfg.get_or("scene.sensor_speed", d.sensor_speed)?,
        sensor_yaw_rate_deg: cfg.get_or("scene.sensor_yaw_rate_deg", d.sensor_yaw_rate_deg)?,
        azimuth_res_deg: cfg.get_or("scene.azimuth_res_deg", d.azimuth_res_deg)?,
        elevation_res_deg: cfg.get_or("scene.elevation_res_deg", d.elevation_res_deg)?,
        num_classes: cfg.get_or("scene.num_classes", d.num_classes)?,
        classes: d.classes,
        seed,
    };
    scene.classes.ground = cfg.get_or("scene.class_ground", scene.classes.ground)?;
    scene.classes.building = cfg.get_or("scene.class_building", scene.classes.building)?;
    scene.classes.car = cfg.get_or("scene.class_car", scene.classes.car)?;
    scene.classes.pole = cfg.get_or("scene.class_pole", scene.classes.pole)?;
    scene.classes.person = cfg.get_or("scene.class_person", scene.classes.person)?;
    Ok(scene)
}

/// Noise settings from the `[noise]` section over the library defaults.
pub fn noise_config(cfg: &Config, seed: u64) -> Result<p2net::synth::NoiseConfig> {
    let d = p2net::synth::NoiseConfig::default();
    let mut noise = p2net::synth::NoiseConfig {
        epsilon: cfg.get_or("noise.epsilon", d.epsilon)?,
        p_occ: cfg.get_or("noise.p_occ", d.p_occ)?,
        confusable: d.confusable,
        seed,
    };
    if let Some(raw) = cfg.get("noise.confusable") {
        // "1:9,9:10" pairs replace the default map entirely
        let mut map = std::collections::BTreeMap::new();
        for pair in raw.split(',') {
            let (from, to) = pair
                .split_once(':')
                .ok_or_else(|| anyhow!("noise.confusable: bad pair {pair:?}"))?;
            map.insert(from.trim().parse::<u16>()?, to.trim().parse::<u16>()?);
        }
        noise.confusable = map;
    }
    Ok(noise)
}

/// Training settings from the `[train]` section over the library defaults.
pub fn train_config(cfg: &Config, seed: u64) -> Result<p2net::refiner::TrainConfig> {
    let d = p2net::refiner::TrainConfig::default();
    let ignore = cfg.get_u16_list("train.ignore", &[0])?;
    Ok(p2net::refiner::TrainConfig {
        base_lr: cfg.get_or("train.base_lr", d.base_lr)?,
        lr_decay: cfg.get_or("train.lr_decay", d.lr_decay)?,
        epochs: cfg.get_or("train.epochs", d.epochs)?,
        points_per_frame: cfg.get_or("train.points_per_frame", d.points_per_frame)?,
        seed,
        adam: p2net::refiner::AdamParams {
            beta1: cfg.get_or("train.adam_beta1", d.adam.beta1)?,
            beta2: cfg.get_or("train.adam_beta2", d.adam.beta2)?,
            epsilon: cfg.get_or("train.adam_epsilon", d.adam.epsilon)?,
        },
        ignore_classes: ignore.into_iter().collect(),
    })
}

/// Fusion depth and start policy from the `[fuse]` section.
pub fn fuse_settings(cfg: &Config) -> Result<(u16, p2net::fusion::StartPolicy)> {
    let k: u16 = cfg.get_or("fuse.k", 2)?;
    let policy = match cfg.get("fuse.policy").unwrap_or("skip") {
        "skip" => p2net::fusion::StartPolicy::Skip,
        "pad" => p2net::fusion::StartPolicy::Pad,
        other => bail!("fuse.policy must be skip or pad, got {other:?}"),
    };
    Ok((k, policy))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_sections_and_comments() {
        let cfg = Config::parse(
            "top=1\n[scene]\nframes = 12 # trailing comment\n\n[train]\nepochs=7\n",
        )
        .unwrap();
        assert_eq!(cfg.get("top"), Some("1"));
        assert_eq!(cfg.get_or::<usize>("scene.frames", 0).unwrap(), 12);
        assert_eq!(cfg.get_or::<u32>("train.epochs", 0).unwrap(), 7);
        assert_eq!(cfg.get_or::<u32>("train.missing", 9).unwrap(), 9);
    }

    #[test]
    fn overrides_win() {
        let mut cfg = Config::parse("[scene]\nframes=12\n").unwrap();
        cfg.apply_overrides(&["scene.frames=30".into(), "noise.p_occ=0.5".into()])
            .unwrap();
        assert_eq!(cfg.get_or::<usize>("scene.frames", 0).unwrap(), 30);
        assert_eq!(cfg.get_or::<f64>("noise.p_occ", 0.0).unwrap(), 0.5);
        assert!(cfg.apply_overrides(&["nonsense".into()]).is_err());
    }

    #[test]
    fn bad_line_is_rejected() {
        assert!(Config::parse("[scene]\nframes\n").is_err());
    }

    #[test]
    fn typed_views() {
        let cfg = Config::parse("[scene]\nframes=10\n[train]\nignore=0,3\n").unwrap();
        let scene = scene_config(&cfg, 42).unwrap();
        assert_eq!(scene.frames, 10);
        assert_eq!(scene.seed, 42);
        let train = train_config(&cfg, 42).unwrap();
        assert_eq!(
            train.ignore_classes,
            std::collections::BTreeSet::from([0, 3])
        );
        let (k, policy) = fuse_settings(&cfg).unwrap();
        assert_eq!(k, 2);
        assert_eq!(policy, p2net::fusion::StartPolicy::Skip);
    }
}
