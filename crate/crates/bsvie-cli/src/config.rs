//! Run configuration: one JSON document per run, strict about unknown
//! keys, with dotted-path `--set` overrides for sweeps.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub t_max: f64,
    pub n_panels: usize,
    pub pts_per_panel: usize,
    pub grading_rate: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelConfig {
    /// `Phi(t,s) = alpha e^{-gamma (s-t)}`.
    Example1 { alpha: f64, gamma: f64 },
    /// `Phi(t,s) = value` (separable constant).
    SeparableConstant { value: f64 },
    /// `Phi(t,s) = scale e^{-rate s}` (separable exponential).
    SeparableExp { scale: f64, rate: f64 },
    /// Kernel tabulated in a CSV file with `t,s,phi` rows on a rectangular
    /// lattice; bilinear interpolation in between. `c` and `rate` declare
    /// the exponential decay bound.
    Tabulated { path: String, c: f64, rate: f64 },
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriverConfig {
    Zero,
    /// `h(t,s) = scale e^{-rate s}`.
    Exp { scale: f64, rate: f64 },
    /// Stochastic `h(s, omega) = scale e^{-rate s} cos(B(s))`.
    ExpCos { scale: f64, rate: f64 },
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum XiConfig {
    Zero,
    Constant { value: f64 },
    /// `xi(s) = xi0 e^{-delta s}`.
    Exp { xi0: f64, delta: f64 },
}

impl XiConfig {
    pub fn make(&self) -> impl Fn(f64) -> f64 + Send + Sync + Clone + 'static {
        let cfg = self.clone();
        move |s: f64| match cfg {
            XiConfig::Zero => 0.0,
            XiConfig::Constant { value } => value,
            XiConfig::Exp { xi0, delta } => xi0 * (-delta * s).exp(),
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct JumpsConfig {
    pub marks: Vec<f64>,
    pub rates: Vec<f64>,
    pub beta0: f64,
}

#[derive(Debug, Clone, Deserialize, Serialize, Default)]
#[serde(deny_unknown_fields)]
pub struct MeasureConfig {
    #[serde(default = "default_xi")]
    pub xi: XiConfig,
    #[serde(default)]
    pub jumps: Option<JumpsConfig>,
    /// Marks the (out-of-scope) general random-coefficient case; `Z`/`K`
    /// extraction refuses it.
    #[serde(default)]
    pub random_coefficients: bool,
}

fn default_xi() -> XiConfig {
    XiConfig::Zero
}

#[derive(Debug, Clone, Copy, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    pub n_paths: usize,
    pub seed: u64,
    #[serde(default = "default_degree")]
    pub basis_degree: usize,
}

fn default_degree() -> usize {
    3
}

#[derive(Debug, Clone, Copy, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    pub series_tol: f64,
    pub picard_tol: f64,
    pub picard_max_iter: usize,
    /// Verifier acceptance: RMS(residual) / RMS(U) must stay below this.
    pub verifier_ratio: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            series_tol: 1e-12,
            picard_tol: 1e-10,
            picard_max_iter: 200,
            verifier_ratio: 0.5,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ZkConfig {
    pub enabled: bool,
    #[serde(default)]
    pub rows: Vec<usize>,
}

#[derive(Debug, Clone, Deserialize, Serialize, Default)]
#[serde(deny_unknown_fields)]
pub struct VerifiersConfig {
    #[serde(default)]
    pub martingale_representation: bool,
    #[serde(default)]
    pub m_solution: Option<MSolutionConfig>,
}

#[derive(Debug, Clone, Copy, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct MSolutionConfig {
    pub t1_node: usize,
    pub t2_node: usize,
    pub max_ratio: f64,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Example1Config {
    pub alpha: f64,
    pub gamma: f64,
    pub mu: f64,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PhiConfig {
    Constant { value: f64 },
    /// `phi(s) = scale e^{-rate s}`.
    Exp { scale: f64, rate: f64 },
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Example2Config {
    pub phi: PhiConfig,
    /// Driver `h(s) = scale e^{-rate s}`.
    pub h_scale: f64,
    pub h_rate: f64,
    #[serde(default)]
    pub mc: Option<McConfig>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    pub a: f64,
    #[serde(default)]
    pub b0: f64,
    #[serde(default = "default_b_rate")]
    pub b_rate: f64,
    pub c: f64,
    pub rho: f64,
    pub sigma: f64,
    pub x0: f64,
    pub n_paths: usize,
    pub seed: u64,
    #[serde(default = "default_cap")]
    pub explosion_cap: f64,
    /// "zero" | "candidate" | "random".
    pub control: String,
    /// Driver of the adjoint BSVIE used for the candidate feedback
    /// (`h(t,s) = scale e^{-rate s}`). The adjoint arrives with h = 0,
    /// which makes the candidate vanish; a nonzero driver is opt-in.
    #[serde(default)]
    pub adjoint_h: Option<AdjointDriverConfig>,
    #[serde(default = "default_adjoint_lambda")]
    pub adjoint_lambda: f64,
    /// Also run the zero / candidate / random comparison with
    /// stationarity probes.
    #[serde(default)]
    pub compare: bool,
}

#[derive(Debug, Clone, Copy, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AdjointDriverConfig {
    pub scale: f64,
    pub rate: f64,
}

fn default_b_rate() -> f64 {
    1.0
}

fn default_cap() -> f64 {
    1e9
}

fn default_adjoint_lambda() -> f64 {
    6.0
}

/// The single JSON document driving a run.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Worker threads; 0 means machine parallelism. The BSVIE_THREADS
    /// environment variable overrides this key.
    #[serde(default)]
    pub threads: usize,
    pub output_dir: String,
    pub grid: GridConfig,
    #[serde(default)]
    pub kernel: Option<KernelConfig>,
    #[serde(default)]
    pub driver: Option<DriverConfig>,
    #[serde(default)]
    pub measure: MeasureConfig,
    #[serde(default)]
    pub mc: Option<McConfig>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub zk: Option<ZkConfig>,
    #[serde(default)]
    pub verifiers: VerifiersConfig,
    #[serde(default)]
    pub relaxed_contraction: bool,
    #[serde(default)]
    pub dump_paths: bool,
    #[serde(default)]
    pub example1: Option<Example1Config>,
    #[serde(default)]
    pub example2: Option<Example2Config>,
    #[serde(default)]
    pub control: Option<ControlConfig>,
}

/// Configuration loading error (exit code 1).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

/// Apply a `--set key.path=value` override onto the raw JSON document.
fn apply_override(value: &mut serde_json::Value, spec: &str) -> Result<(), ConfigError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError(format!("--set expects KEY=VALUE, got '{spec}'")))?;
    let parsed: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cursor = value;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if i + 1 == parts.len() {
            match cursor {
                serde_json::Value::Object(map) => {
                    map.insert(part.to_string(), parsed);
                    return Ok(());
                }
                _ => return Err(ConfigError(format!("cannot set '{path}': not an object"))),
            }
        }
        cursor = match cursor {
            serde_json::Value::Object(map) => map
                .entry(part.to_string())
                .or_insert_with(|| serde_json::Value::Object(Default::default())),
            _ => return Err(ConfigError(format!("cannot traverse '{path}'"))),
        };
    }
    unreachable!()
}

/// Load, override, and validate a run configuration. Returns the parsed
/// config together with the SHA-256 of the exact document used.
pub fn load_config(path: &std::path::Path, sets: &[String]) -> Result<(RunConfig, String), ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
    let mut value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| ConfigError(format!("malformed JSON in {}: {e}", path.display())))?;
    for s in sets {
        apply_override(&mut value, s)?;
    }
    let canonical = serde_json::to_string(&value)
        .map_err(|e| ConfigError(format!("cannot canonicalize config: {e}")))?;
    let hash = format!("{:x}", Sha256::digest(canonical.as_bytes()));
    let config: RunConfig = serde_json::from_value(value)
        .map_err(|e| ConfigError(format!("invalid config: {e}")))?;
    Ok((config, hash))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> serde_json::Value {
        serde_json::json!({
            "output_dir": "out",
            "grid": {"t_max": 4.0, "n_panels": 4, "pts_per_panel": 4,
                      "grading_rate": 1.2, "lambda": 2.0}
        })
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v = minimal();
        v["no_such_key"] = serde_json::json!(1);
        let r: Result<RunConfig, _> = serde_json::from_value(v);
        assert!(r.is_err());
    }

    #[test]
    fn overrides_apply() {
        let mut v = minimal();
        apply_override(&mut v, "grid.t_max=8.5").unwrap();
        apply_override(&mut v, "mc.n_paths=100").unwrap();
        apply_override(&mut v, "mc.seed=7").unwrap();
        let cfg: RunConfig = serde_json::from_value(v).unwrap();
        assert_eq!(cfg.grid.t_max, 8.5);
        assert_eq!(cfg.mc.unwrap().n_paths, 100);
    }
}
