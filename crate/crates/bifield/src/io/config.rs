//! Flat key = value run configuration.
//!
//! Lines hold `key = value` pairs; `#` starts a comment. Keys are checked
//! against the known set so typos fail loudly, and every effective value
//! is echoed into the run manifest.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// All recognized configuration keys.
pub const KNOWN_KEYS: &[&str] = &[
    "stations",
    "obs",
    "out_dir",
    "model",
    "years",
    "sigma_t",
    "sigma_h",
    "beta_prior_variance",
    "theta_prior_variance",
    "lambda",
    "boxcox_grid_min",
    "boxcox_grid_max",
    "boxcox_grid_step",
    "mesh_max_edge_km",
    "mesh_extension_km",
    "fit_max_iters",
    "fit_grad_tol",
    "fit_theta0",
    "report_correlation",
    "validate_models",
    "validate_settings",
    "validate_seed",
    "validate_n_holdout",
    "validate_exclude_years",
    "validate_score_scale",
    "targets",
    "grid",
    "raster_elevation",
    "raster_distance",
    "reconstruct_years",
    "reconstruct_fields",
    "reconstruct_compare_model",
    "sim_model",
    "sim_theta",
    "sim_beta_t",
    "sim_beta_h",
    "sim_years",
    "sim_n_stations_t",
    "sim_n_stations_h",
    "sim_domain",
    "sim_seed",
    "sim_noise",
    "sim_lambda",
    "variogram_bins",
];

/// Parsed configuration: raw text (hashed into the manifest) plus the
/// key-value map.
#[derive(Debug, Clone, Default)]
pub struct Config {
    map: BTreeMap<String, String>,
    pub raw_text: String,
}

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        let mut map = BTreeMap::new();
        for (ln, line) in text.lines().enumerate() {
            let line = match line.find('#') {
                Some(pos) => &line[..pos],
                None => line,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Schema(format!("config line {}: expected 'key = value'", ln + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !KNOWN_KEYS.contains(&key) {
                return Err(Error::Schema(format!(
                    "config line {}: unknown key '{key}'",
                    ln + 1
                )));
            }
            if map.insert(key.to_string(), value.to_string()).is_some() {
                return Err(Error::Schema(format!(
                    "config line {}: duplicate key '{key}'",
                    ln + 1
                )));
            }
        }
        Ok(Config {
            map,
            raw_text: text.to_string(),
        })
    }

    pub fn from_file(path: &std::path::Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Schema(format!("cannot read config {}: {e}", path.display())))?;
        Config::parse(&text)
    }

    /// Override a key (CLI flags take precedence over the file).
    pub fn set(&mut self, key: &str, value: String) {
        assert!(KNOWN_KEYS.contains(&key), "unknown config key '{key}'");
        self.map.insert(key.to_string(), value);
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Schema(format!("missing required config key '{key}'")))
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| Error::Schema(format!("config key '{key}': bad number '{s}'"))),
        }
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| Error::Schema(format!("config key '{key}': bad integer '{s}'"))),
        }
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64> {
        match self.get(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| Error::Schema(format!("config key '{key}': bad integer '{s}'"))),
        }
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true") | Some("1") | Some("yes") => Ok(true),
            Some("false") | Some("0") | Some("no") => Ok(false),
            Some(s) => Err(Error::Schema(format!(
                "config key '{key}': bad boolean '{s}'"
            ))),
        }
    }

    pub fn get_f64_list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.get(key) {
            None => Ok(None),
            Some(s) => {
                let mut out = Vec::new();
                for part in s.split(',') {
                    let part = part.trim();
                    if part.is_empty() {
                        continue;
                    }
                    out.push(part.parse().map_err(|_| {
                        Error::Schema(format!("config key '{key}': bad number '{part}'"))
                    })?);
                }
                Ok(Some(out))
            }
        }
    }

    pub fn get_i32_list(&self, key: &str) -> Result<Option<Vec<i32>>> {
        match self.get(key) {
            None => Ok(None),
            Some(s) => {
                let mut out = Vec::new();
                for part in s.split(',') {
                    let part = part.trim();
                    if part.is_empty() {
                        continue;
                    }
                    out.push(part.parse().map_err(|_| {
                        Error::Schema(format!("config key '{key}': bad integer '{part}'"))
                    })?);
                }
                Ok(Some(out))
            }
        }
    }

    pub fn get_str_list(&self, key: &str) -> Option<Vec<String>> {
        self.get(key).map(|s| {
            s.split(',')
                .map(|p| p.trim().to_string())
                .filter(|p| !p.is_empty())
                .collect()
        })
    }

    /// Deterministic 64-bit FNV-1a hash of the raw config text plus any
    /// overrides, identifying a run in the manifest.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
        };
        for (k, v) in &self.map {
            eat(k.as_bytes());
            eat(b"=");
            eat(v.as_bytes());
            eat(b"\n");
        }
        h
    }

    /// Sorted effective key-value pairs (for the manifest).
    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_overrides() {
        let text = "model = bmth\n# comment\nsigma_t = 0.2  # inline\n\nvalidate_seed=7\n";
        let mut cfg = Config::parse(text).unwrap();
        assert_eq!(cfg.get("model"), Some("bmth"));
        assert_eq!(cfg.get_f64("sigma_t", 0.1).unwrap(), 0.2);
        assert_eq!(cfg.get_u64("validate_seed", 1).unwrap(), 7);
        assert_eq!(cfg.get_f64("sigma_h", 0.01).unwrap(), 0.01);
        cfg.set("model", "um".into());
        assert_eq!(cfg.get("model"), Some("um"));
    }

    #[test]
    fn rejects_unknown_and_duplicate_keys() {
        assert!(matches!(
            Config::parse("no_such_key = 1\n"),
            Err(Error::Schema(_))
        ));
        assert!(matches!(
            Config::parse("model = um\nmodel = bmth\n"),
            Err(Error::Schema(_))
        ));
        assert!(Config::parse("justtext\n").is_err());
    }

    #[test]
    fn hash_tracks_effective_values() {
        let a = Config::parse("model = um\nvalidate_seed = 1\n").unwrap();
        let b = Config::parse("validate_seed = 1\nmodel = um\n").unwrap();
        assert_eq!(a.hash(), b.hash(), "order-insensitive");
        let mut c = a.clone();
        c.set("validate_seed", "2".into());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn lists() {
        let cfg = Config::parse("years = 2007, 2008,2009\nfit_theta0 = 0.5,1.5\n").unwrap();
        assert_eq!(
            cfg.get_i32_list("years").unwrap().unwrap(),
            vec![2007, 2008, 2009]
        );
        assert_eq!(
            cfg.get_f64_list("fit_theta0").unwrap().unwrap(),
            vec![0.5, 1.5]
        );
        assert_eq!(cfg.get_i32_list("validate_exclude_years").unwrap(), None);
    }
}
