//! Plain-text experiment configuration: `[section]` headers and `key = value`
//! lines, `#` comments.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use msinv_core::assembly::AssemblyParams;
use msinv_core::gmsfem::SpectralWeight;
use msinv_core::inversion::{GradientMode, StepPolicy};

use crate::cells::CellSpec;
use crate::CliError;

/// Raw `section.key -> (value, line)` table in file order of first appearance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    pub entries: BTreeMap<String, (String, usize)>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut entries = BTreeMap::new();
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| CliError::Parse {
                    line: line_no,
                    key: None,
                    message: format!("unterminated section header `{line}`"),
                })?;
                section = name.trim().to_string();
                if section.is_empty() {
                    return Err(CliError::Parse {
                        line: line_no,
                        key: None,
                        message: "empty section name".into(),
                    });
                }
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| CliError::Parse {
                line: line_no,
                key: None,
                message: format!("expected `key = value`, found `{line}`"),
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(CliError::Parse {
                    line: line_no,
                    key: None,
                    message: "empty key".into(),
                });
            }
            let full = if section.is_empty() {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            if entries.contains_key(&full) {
                return Err(CliError::Parse {
                    line: line_no,
                    key: Some(full),
                    message: "duplicate key".into(),
                });
            }
            entries.insert(full, (value.trim().to_string(), line_no));
        }
        Ok(Self { entries })
    }

    /// Replaces or inserts `section.key`; used by parameter sweeps.
    pub fn set(&mut self, key: &str, value: &str) {
        let line = self.entries.get(key).map_or(0, |e| e.1);
        self.entries.insert(key.to_string(), (value.to_string(), line));
    }

    fn take<T: FromStr>(&self, used: &mut Vec<String>, key: &str, default: Option<T>) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        used.push(key.to_string());
        match self.entries.get(key) {
            Some((v, line)) => v.parse::<T>().map_err(|e| CliError::Parse {
                line: *line,
                key: Some(key.to_string()),
                message: format!("invalid value `{v}`: {e}"),
            }),
            None => default.ok_or_else(|| CliError::Parse {
                line: 0,
                key: Some(key.to_string()),
                message: "missing required key".into(),
            }),
        }
    }

    fn line_of(&self, key: &str) -> usize {
        self.entries.get(key).map_or(0, |e| e.1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub coarse_n: usize,
    pub refine_r: usize,
    pub true_fractures: PathBuf,
    pub prior_fractures: PathBuf,
    pub params: AssemblyParams,
    pub n_b: usize,
    pub spectral_weight: SpectralWeight,
    pub sigma_m: f64,
    pub sigma_a: f64,
    pub sigma_f: f64,
    pub step_length: f64,
    pub iterations: usize,
    pub j_rel_tol: f64,
    pub gradient_mode: GradientMode,
    pub step_policy: StepPolicy,
    pub update_mask: CellSpec,
    pub observed_cells: CellSpec,
    pub noise: f64,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Resolved `key = value` lines in canonical order.
    pub resolved: Vec<(String, String)>,
}

struct Weight(SpectralWeight);

impl FromStr for Weight {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "multiscale" => Ok(Self(SpectralWeight::MultiscaleHats)),
            "linear" => Ok(Self(SpectralWeight::LinearHats)),
            other => Err(format!("expected `multiscale` or `linear`, got `{other}`")),
        }
    }
}

struct Mode<T>(T);

impl FromStr for Mode<GradientMode> {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        s.parse().map(Mode).map_err(|e: msinv_core::Error| e.to_string())
    }
}

impl FromStr for Mode<StepPolicy> {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        s.parse().map(Mode).map_err(|e: msinv_core::Error| e.to_string())
    }
}

const KNOWN_KEYS: &[&str] = &[
    "mesh.coarse_n",
    "mesh.refine_r",
    "fractures.true",
    "fractures.prior",
    "params.k_m",
    "params.k_f",
    "params.c_m",
    "params.c_f",
    "params.f",
    "params.p0",
    "params.t_final",
    "params.n_t",
    "space.n_b",
    "space.weight",
    "inversion.sigma_m",
    "inversion.sigma_a",
    "inversion.sigma_f",
    "inversion.step_length",
    "inversion.iterations",
    "inversion.j_rel_tol",
    "inversion.gradient_mode",
    "inversion.step_policy",
    "inversion.update_mask",
    "observations.cells",
    "observations.noise",
    "observations.seed",
    "output.dir",
];

impl ExperimentConfig {
    /// Reads a config file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read config `{}`: {e}", path.display())))?;
        let raw = RawConfig::parse(&text)?;
        Self::from_raw(&raw, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn from_raw(raw: &RawConfig, base: &Path) -> Result<Self, CliError> {
        if let Some((key, (_, line))) = raw.entries.iter().find(|(k, _)| !KNOWN_KEYS.contains(&k.as_str())) {
            return Err(CliError::Parse {
                line: *line,
                key: Some(key.clone()),
                message: "unknown key".into(),
            });
        }
        let d = AssemblyParams::default();
        let mut used = Vec::new();
        let u = &mut used;
        let coarse_n: usize = raw.take(u, "mesh.coarse_n", Some(10))?;
        let refine_r: usize = raw.take(u, "mesh.refine_r", Some(4))?;
        let true_fractures: String = raw.take(u, "fractures.true", None)?;
        let prior_fractures: String = raw.take(u, "fractures.prior", None)?;
        let params = AssemblyParams {
            k_m: raw.take(u, "params.k_m", Some(d.k_m))?,
            k_f: raw.take(u, "params.k_f", Some(d.k_f))?,
            c_m: raw.take(u, "params.c_m", Some(d.c_m))?,
            c_f: raw.take(u, "params.c_f", Some(d.c_f))?,
            f: raw.take(u, "params.f", Some(d.f))?,
            p0: raw.take(u, "params.p0", Some(d.p0))?,
            t_final: raw.take(u, "params.t_final", Some(d.t_final))?,
            n_t: raw.take(u, "params.n_t", Some(d.n_t))?,
        };
        let n_b: usize = raw.take(u, "space.n_b", Some(2))?;
        let weight: Weight = raw.take(u, "space.weight", Some(Weight(SpectralWeight::MultiscaleHats)))?;
        let sigma_m: f64 = raw.take(u, "inversion.sigma_m", Some(1.0))?;
        let sigma_a: f64 = raw.take(u, "inversion.sigma_a", Some(1.0))?;
        let sigma_f: f64 = raw.take(u, "inversion.sigma_f", Some(1e4))?;
        let step_length: f64 = raw.take(u, "inversion.step_length", Some(1e-12))?;
        let iterations: usize = raw.take(u, "inversion.iterations", Some(100))?;
        let j_rel_tol: f64 = raw.take(u, "inversion.j_rel_tol", Some(1e-10))?;
        let gradient_mode: Mode<GradientMode> = raw.take(u, "inversion.gradient_mode", Some(Mode(GradientMode::Consistent)))?;
        let step_policy: Mode<StepPolicy> = raw.take(u, "inversion.step_policy", Some(Mode(StepPolicy::Fixed)))?;
        let update_mask: CellSpec = raw.take(u, "inversion.update_mask", Some(CellSpec::All))?;
        let observed_cells: CellSpec = raw.take(u, "observations.cells", Some(CellSpec::All))?;
        let noise: f64 = raw.take(u, "observations.noise", Some(0.0))?;
        let seed: u64 = raw.take(u, "observations.seed", Some(1))?;
        let output_dir: String = raw.take(u, "output.dir", Some("out".to_string()))?;

        let check = |ok: bool, key: &str, msg: &str| -> Result<(), CliError> {
            if ok {
                Ok(())
            } else {
                Err(CliError::Parse {
                    line: raw.line_of(key),
                    key: Some(key.to_string()),
                    message: msg.to_string(),
                })
            }
        };
        check(coarse_n >= 1, "mesh.coarse_n", "must be at least 1")?;
        check(refine_r >= 1, "mesh.refine_r", "must be at least 1")?;
        check(n_b >= 1, "space.n_b", "must be at least 1")?;
        check(params.k_m > 0.0, "params.k_m", "must be positive")?;
        check(params.k_f > 0.0, "params.k_f", "must be positive")?;
        check(params.c_m > 0.0, "params.c_m", "must be positive")?;
        check(params.t_final > 0.0, "params.t_final", "must be positive")?;
        check(params.n_t >= 1, "params.n_t", "must be at least 1")?;
        check(sigma_m > 0.0, "inversion.sigma_m", "must be positive")?;
        check(sigma_a > 0.0, "inversion.sigma_a", "must be positive")?;
        check(sigma_f > 0.0, "inversion.sigma_f", "must be positive")?;
        check(step_length > 0.0, "inversion.step_length", "must be positive")?;
        check(j_rel_tol >= 0.0, "inversion.j_rel_tol", "must be non-negative")?;
        check(noise >= 0.0 && noise.is_finite(), "observations.noise", "must be non-negative")?;

        let resolve = |p: &str| -> PathBuf {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        let resolved = vec![
            ("mesh.coarse_n".into(), coarse_n.to_string()),
            ("mesh.refine_r".into(), refine_r.to_string()),
            ("fractures.true".into(), true_fractures.clone()),
            ("fractures.prior".into(), prior_fractures.clone()),
            ("params.k_m".into(), format!("{:e}", params.k_m)),
            ("params.k_f".into(), format!("{:e}", params.k_f)),
            ("params.c_m".into(), format!("{:e}", params.c_m)),
            ("params.c_f".into(), format!("{:e}", params.c_f)),
            ("params.f".into(), format!("{:e}", params.f)),
            ("params.p0".into(), format!("{:e}", params.p0)),
            ("params.t_final".into(), format!("{:e}", params.t_final)),
            ("params.n_t".into(), params.n_t.to_string()),
            ("space.n_b".into(), n_b.to_string()),
            (
                "space.weight".into(),
                match weight.0 {
                    SpectralWeight::MultiscaleHats => "multiscale",
                    SpectralWeight::LinearHats => "linear",
                }
                .into(),
            ),
            ("inversion.sigma_m".into(), format!("{sigma_m:e}")),
            ("inversion.sigma_a".into(), format!("{sigma_a:e}")),
            ("inversion.sigma_f".into(), format!("{sigma_f:e}")),
            ("inversion.step_length".into(), format!("{step_length:e}")),
            ("inversion.iterations".into(), iterations.to_string()),
            ("inversion.j_rel_tol".into(), format!("{j_rel_tol:e}")),
            ("inversion.gradient_mode".into(), gradient_mode.0.to_string()),
            ("inversion.step_policy".into(), step_policy.0.to_string()),
            ("inversion.update_mask".into(), update_mask.to_string()),
            ("observations.cells".into(), observed_cells.to_string()),
            ("observations.noise".into(), format!("{noise}")),
            ("observations.seed".into(), seed.to_string()),
            ("output.dir".into(), output_dir.clone()),
        ];
        Ok(Self {
            coarse_n,
            refine_r,
            true_fractures: resolve(&true_fractures),
            prior_fractures: resolve(&prior_fractures),
            params,
            n_b,
            spectral_weight: weight.0,
            sigma_m,
            sigma_a,
            sigma_f,
            step_length,
            iterations,
            j_rel_tol,
            gradient_mode: gradient_mode.0,
            step_policy: step_policy.0,
            update_mask,
            observed_cells,
            noise,
            seed,
            output_dir: resolve(&output_dir),
            resolved,
        })
    }
}
