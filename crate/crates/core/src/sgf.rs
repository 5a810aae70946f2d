//! Savitzky-Golay smoothing.
//!
//! Weights are the least-squares polynomial-fit coefficients for the value
//! at one evaluation position inside the window. The streaming filter
//! evaluates at the newest sample; while fewer than `window` samples exist
//! it fits all available samples with the order reduced to fit.

use std::collections::VecDeque;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvalPoint {
    /// Newest sample in the window (causal).
    #[default]
    Trailing,
    /// Middle of the window (offline, lags by half a window when streamed).
    Centered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgfConfig {
    pub window: usize,
    pub order: usize,
    /// Only 0 (smoothing) is supported.
    #[serde(default)]
    pub derivative: usize,
    #[serde(default)]
    pub eval: EvalPoint,
}

impl Default for SgfConfig {
    fn default() -> Self {
        Self {
            window: 299,
            order: 3,
            derivative: 0,
            eval: EvalPoint::Trailing,
        }
    }
}

impl SgfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window % 2 == 0 {
            return Err(Error::Config(format!("sgf window {} must be odd", self.window)));
        }
        if self.order >= self.window {
            return Err(Error::Config(format!(
                "sgf order {} must be < window {}",
                self.order, self.window
            )));
        }
        if self.derivative != 0 {
            return Err(Error::Config("sgf derivatives are not supported".into()));
        }
        Ok(())
    }

    fn position(&self) -> usize {
        match self.eval {
            EvalPoint::Trailing => self.window - 1,
            EvalPoint::Centered => self.window / 2,
        }
    }
}

/// Least-squares weights for the fitted value at sample `pos` of a window of
/// `len` samples using a polynomial of degree `order`.
pub fn weights_at(len: usize, order: usize, pos: usize) -> Result<Vec<f64>> {
    if len == 0 || pos >= len || order >= len {
        return Err(Error::Config(format!(
            "degenerate fit: window {len}, order {order}, position {pos}"
        )));
    }
    // Abscissae relative to the evaluation point, scaled to about [-1, 1]
    // to keep the Vandermonde matrix well conditioned.
    let half = ((len - 1) as f64 / 2.0).max(1.0);
    let v = DMatrix::from_fn(len, order + 1, |i, j| {
        ((i as f64 - pos as f64) / half).powi(j as i32)
    });
    // The value at the evaluation point is the constant coefficient, i.e.
    // the first row of pinv(V).
    let svd = v.svd(true, true);
    let s_max = svd.singular_values.max();
    if svd.singular_values.min() <= s_max * 1e-12 {
        return Err(Error::Numeric("sgf design matrix is singular".into()));
    }
    let pinv = svd
        .pseudo_inverse(s_max * 1e-13)
        .map_err(|e| Error::Numeric(e.to_string()))?;
    Ok(pinv.row(0).iter().copied().collect())
}

/// Convolution weights for `config`, oldest sample first.
pub fn sgf_weights(config: &SgfConfig) -> Result<Vec<f64>> {
    config.validate()?;
    weights_at(config.window, config.order, config.position())
}

/// White-noise variance reduction factor `1 / sum(w^2)`.
pub fn variance_reduction(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// Precomputed trailing weights for every warm-up length.
#[derive(Debug)]
pub struct SgfKernel {
    window: usize,
    /// `warmup[m - 1]` holds the weights for `m` available samples.
    warmup: Vec<Vec<f64>>,
}

impl SgfKernel {
    pub fn new(config: &SgfConfig) -> Result<Arc<Self>> {
        config.validate()?;
        let warmup = (1..=config.window)
            .map(|m| weights_at(m, config.order.min(m - 1), m - 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(Arc::new(Self {
            window: config.window,
            warmup,
        }))
    }

    pub fn weights(&self, available: usize) -> &[f64] {
        &self.warmup[available.clamp(1, self.window) - 1]
    }
}

/// Causal per-channel smoother.
#[derive(Debug, Clone)]
pub struct SgfStream {
    kernel: Arc<SgfKernel>,
    buf: VecDeque<f64>,
}

impl SgfStream {
    pub fn new(kernel: Arc<SgfKernel>) -> Self {
        let cap = kernel.window;
        Self {
            kernel,
            buf: VecDeque::with_capacity(cap),
        }
    }

    /// Add a sample and return the smoothed value at that sample.
    pub fn push(&mut self, x: f64) -> f64 {
        if self.buf.len() == self.kernel.window {
            self.buf.pop_front();
        }
        self.buf.push_back(x);
        let w = self.kernel.weights(self.buf.len());
        w.iter().zip(self.buf.iter()).map(|(a, b)| a * b).sum()
    }

    pub fn is_warm(&self) -> bool {
        self.buf.len() == self.kernel.window
    }
}

/// Smooth a whole signal.
///
/// With [`EvalPoint::Trailing`] this is the streaming filter applied sample
/// by sample. With [`EvalPoint::Centered`] each output uses the window
/// centered on it, shifted inward at the edges.
pub fn apply(signal: &[f64], config: &SgfConfig) -> Result<Vec<f64>> {
    match config.eval {
        EvalPoint::Trailing => {
            let mut s = SgfStream::new(SgfKernel::new(config)?);
            Ok(signal.iter().map(|&x| s.push(x)).collect())
        }
        EvalPoint::Centered => {
            config.validate()?;
            let n = signal.len();
            if n == 0 {
                return Ok(Vec::new());
            }
            let len = config.window.min(n);
            let order = config.order.min(len - 1);
            let half = len / 2;
            let center = weights_at(len, order, half)?;
            let mut edge_cache: Vec<Option<Vec<f64>>> = vec![None; len];
            let mut out = Vec::with_capacity(n);
            for k in 0..n {
                let start = k.saturating_sub(half).min(n - len);
                let pos = k - start;
                let w = if pos == half {
                    &center
                } else {
                    if edge_cache[pos].is_none() {
                        edge_cache[pos] = Some(weights_at(len, order, pos)?);
                    }
                    edge_cache[pos].as_ref().unwrap()
                };
                out.push(
                    w.iter()
                        .zip(&signal[start..start + len])
                        .map(|(a, b)| a * b)
                        .sum(),
                );
            }
            Ok(out)
        }
    }
}
