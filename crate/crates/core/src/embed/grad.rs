//! Parameter gradients of losses defined on batches of embeddings.

use super::network::{backward, forward_traced};
use super::params::EmbeddingParams;
use crate::cubeio::HyperCube;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::par;

/// A scalar loss over a batch of embeddings (one row per cube).
pub trait EmbeddingLoss: Sync {
    /// Loss value and `dL/dE`, same shape as `embeddings`.
    fn loss_and_grad(&self, embeddings: &Matrix) -> Result<(f64, Matrix)>;

    /// Optional term depending on the parameters directly, with its gradient.
    fn param_term(&self, _params: &EmbeddingParams) -> Option<(f64, EmbeddingParams)> {
        None
    }
}

/// Result of one forward/backward pass over a batch.
#[derive(Debug, Clone)]
pub struct GradientOutput {
    pub loss: f64,
    pub grad: EmbeddingParams,
    /// The forward embeddings, one row per cube.
    pub embeddings: Matrix,
}

/// Loss value and `dL/dparams` for `batch`.
///
/// Per-cube backward passes may run in parallel; their gradients are summed in
/// batch order, so the result does not depend on thread scheduling.
pub fn gradient(
    loss: &impl EmbeddingLoss,
    params: &EmbeddingParams,
    batch: &[&HyperCube],
    attention: bool,
) -> Result<(f64, EmbeddingParams)> {
    gradient_full(loss, params, batch, attention).map(|o| (o.loss, o.grad))
}

/// Like [`gradient`], also returning the forward embeddings.
pub fn gradient_full(
    loss: &impl EmbeddingLoss,
    params: &EmbeddingParams,
    batch: &[&HyperCube],
    attention: bool,
) -> Result<GradientOutput> {
    let traces = par::map(batch, |c| forward_traced(c, params, attention))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<&[f64]> = traces.iter().map(|t| t.embedding.as_slice()).collect();
    let embeddings = if rows.is_empty() {
        Matrix::zeros(0, params.embedding_dim())
    } else {
        Matrix::from_rows(&rows)?
    };
    let (mut value, d_emb) = loss.loss_and_grad(&embeddings)?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss evaluated to {value}")));
    }
    if d_emb.rows() != embeddings.rows() || d_emb.cols() != embeddings.cols() {
        return Err(Error::arg("loss gradient shape differs from embeddings"));
    }

    let indices: Vec<usize> = (0..traces.len()).collect();
    let per_sample = par::map(&indices, |&i| {
        let mut g = params.zeros_like();
        backward(&traces[i], d_emb.row(i), params, &mut g);
        g
    });
    let mut total = params.zeros_like();
    for g in &per_sample {
        total.add_scaled(g, 1.0);
    }
    if let Some((v, g)) = loss.param_term(params) {
        value += v;
        total.add_scaled(&g, 1.0);
    }
    if !total.is_finite() {
        return Err(Error::Numeric("gradient contains non-finite values".into()));
    }
    Ok(GradientOutput {
        loss: value,
        grad: total,
        embeddings,
    })
}

/// Loss value only; the forward half of [`gradient`].
pub fn loss_value(
    loss: &impl EmbeddingLoss,
    params: &EmbeddingParams,
    batch: &[&HyperCube],
    attention: bool,
) -> Result<f64> {
    let rows = par::map(batch, |c| super::network::embed(c, params, attention))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let embeddings = if rows.is_empty() {
        Matrix::zeros(0, params.embedding_dim())
    } else {
        Matrix::from_rows(&rows)?
    };
    let (mut value, _) = loss.loss_and_grad(&embeddings)?;
    if let Some((v, _)) = loss.param_term(params) {
        value += v;
    }
    Ok(value)
}

/// A loss that ignores its input.
#[derive(Debug, Clone, Copy)]
pub struct ConstantLoss(pub f64);

impl EmbeddingLoss for ConstantLoss {
    fn loss_and_grad(&self, e: &Matrix) -> Result<(f64, Matrix)> {
        Ok((self.0, Matrix::zeros(e.rows(), e.cols())))
    }
}

/// `‖params‖² / 2`, whose gradient is the parameters themselves.
#[derive(Debug, Clone, Copy)]
pub struct ParamNormLoss;

impl EmbeddingLoss for ParamNormLoss {
    fn loss_and_grad(&self, e: &Matrix) -> Result<(f64, Matrix)> {
        Ok((0.0, Matrix::zeros(e.rows(), e.cols())))
    }

    fn param_term(&self, params: &EmbeddingParams) -> Option<(f64, EmbeddingParams)> {
        Some((0.5 * params.squared_norm(), params.clone()))
    }
}

/// `Σ_ij w_ij E_ij` for fixed weights, handy for probing linear responses.
#[derive(Debug, Clone)]
pub struct LinearProbeLoss(pub Matrix);

impl EmbeddingLoss for LinearProbeLoss {
    fn loss_and_grad(&self, e: &Matrix) -> Result<(f64, Matrix)> {
        if e.rows() != self.0.rows() || e.cols() != self.0.cols() {
            return Err(Error::arg("probe weights shape mismatch"));
        }
        let v = e
            .as_slice()
            .iter()
            .zip(self.0.as_slice())
            .map(|(a, b)| a * b)
            .sum();
        Ok((v, self.0.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::params::ModelConfig;

    fn tiny() -> EmbeddingParams {
        EmbeddingParams::init(&ModelConfig {
            in_channels: 4,
            reduction_ratio: 2,
            down_channels: 2,
            stage_widths: vec![3],
            blocks_per_stage: 1,
            embedding_dim: 3,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn cube(v: f32) -> HyperCube {
        HyperCube::from_fn(3, 3, 4, |r, c, ch| {
            v + 0.1 * (r + 2 * c + 3 * ch) as f32 % 0.7
        })
        .unwrap()
    }

    #[test]
    fn constant_loss_zero_gradient() {
        let p = tiny();
        let c = cube(0.2);
        let (v, g) = gradient(&ConstantLoss(3.0), &p, &[&c], true).unwrap();
        assert_eq!(v, 3.0);
        assert_eq!(g.squared_norm(), 0.0);
    }

    #[test]
    fn quadratic_probe_gradient_is_params() {
        let p = tiny();
        let c = cube(0.2);
        let (v, g) = gradient(&ParamNormLoss, &p, &[&c], true).unwrap();
        assert_eq!(g, p);
        assert!((v - 0.5 * p.squared_norm()).abs() < 1e-12);
    }

    #[test]
    fn non_finite_loss_is_numeric_error() {
        let p = tiny();
        let c = cube(0.1);
        assert!(matches!(
            gradient(&ConstantLoss(f64::NAN), &p, &[&c], true),
            Err(Error::Numeric(_))
        ));
    }
}
