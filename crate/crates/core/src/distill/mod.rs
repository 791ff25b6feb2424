//! Feature distillation losses: the SSIM-based structural loss and the two
//! squared-norm baselines (uniform and importance-weighted).

mod loss;
mod ssim;

pub use loss::{baseline_fd_loss, s2il_loss, s2il_terms};
pub use ssim::{ssim, ssim_components, ssim_map, SsimComponents};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How component exponents are applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PowerMode {
    /// Literal `x^e`; a negative base needs an integer exponent.
    Plain,
    /// `sign(x)·|x|^e`, keeping a negative structure term negative so the
    /// index stays in `[-1, 1]`.
    SignPreserving,
}

impl std::str::FromStr for PowerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(PowerMode::Plain),
            "signed" | "sign-preserving" => Ok(PowerMode::SignPreserving),
            other => Err(Error::Config(format!("unknown power mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for PowerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PowerMode::Plain => "plain",
            PowerMode::SignPreserving => "signed",
        })
    }
}

/// Exponents, stabilizers and component switches of the structural index.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub p: f64,
    pub q: f64,
    pub r: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub use_l: bool,
    pub use_c: bool,
    pub use_s: bool,
    pub power: PowerMode,
}

impl Default for SsimParams {
    fn default() -> Self {
        let c2 = 9e-4;
        SsimParams {
            p: 0.1,
            q: 8.0,
            r: 8.0,
            c1: 1e-4,
            c2,
            c3: c2 / 2.0,
            use_l: true,
            use_c: true,
            use_s: true,
            power: PowerMode::SignPreserving,
        }
    }
}

impl SsimParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("c1", self.c1), ("c2", self.c2), ("c3", self.c3)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::contract(format!("stabilizer {name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("p", self.p), ("q", self.q), ("r", self.r)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::contract(format!("exponent {name} must be nonnegative, got {v}")));
            }
        }
        Ok(())
    }

    /// Effective exponents; a disabled component behaves like exponent 0.
    pub fn effective_exponents(&self) -> [f64; 3] {
        [
            if self.use_l { self.p } else { 0.0 },
            if self.use_c { self.q } else { 0.0 },
            if self.use_s { self.r } else { 0.0 },
        ]
    }

    /// Component switches as a compact tag such as `lcs` or `s`.
    pub fn components_tag(&self) -> String {
        let mut s = String::new();
        if self.use_l {
            s.push('l');
        }
        if self.use_c {
            s.push('c');
        }
        if self.use_s {
            s.push('s');
        }
        if s.is_empty() {
            s.push('-');
        }
        s
    }

    pub fn set_components(&mut self, tag: &str) -> Result<()> {
        if tag.chars().any(|c| !matches!(c, 'l' | 'c' | 's' | '-')) {
            return Err(Error::Config(format!("component set `{tag}` may only use l, c, s")));
        }
        self.use_l = tag.contains('l');
        self.use_c = tag.contains('c');
        self.use_s = tag.contains('s');
        Ok(())
    }
}

/// Per-layer, per-channel importance weights for the weighted squared-norm
/// loss, plus the weight of the pooled-feature term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdWeights {
    pub layers: Vec<Vec<f64>>,
    pub pooled: f64,
}

impl FdWeights {
    pub fn ones(channels: &[usize]) -> Self {
        FdWeights {
            layers: channels.iter().map(|&c| vec![1.0; c]).collect(),
            pooled: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.pooled) || !self.layers.iter().flatten().all(|&v| ok(v)) {
            return Err(Error::contract("importance weights must be finite and nonnegative"));
        }
        Ok(())
    }

    /// Parse a weights file: one line per layer with comma-separated channel
    /// weights, then a final line holding the pooled-feature weight. Blank
    /// lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Config(format!("bad weight `{v}`: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        let pooled = match rows.pop() {
            Some(last) if last.len() == 1 => last[0],
            _ => return Err(Error::Config("weights file must end with a single pooled weight".into())),
        };
        let w = FdWeights { layers: rows, pooled };
        w.validate()?;
        Ok(w)
    }
}
