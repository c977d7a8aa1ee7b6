//! Forward and backward passes of the embedding function:
//! channel attention → spectral projection → residual CNN → pooled linear head.

use super::attention::{excite_backward, excite_traced, squeeze_map, Excitation};
use super::layers::{relu_in_place, FeatureMap};
use super::params::{DownsampleParams, EmbeddingParams, ResidualBlock};
use crate::cubeio::HyperCube;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::par;

pub(crate) fn to_feature_map(cube: &HyperCube) -> FeatureMap {
    FeatureMap {
        channels: cube.channels(),
        height: cube.height(),
        width: cube.width(),
        data: cube.data().iter().map(|&v| f64::from(v)).collect(),
    }
}

fn project(x: &FeatureMap, down: &DownsampleParams) -> FeatureMap {
    let proj = &down.proj;
    let n = x.plane();
    let mut out = FeatureMap::zeros(proj.outputs, x.height, x.width);
    for o in 0..proj.outputs {
        let ob = &mut out.data[o * n..(o + 1) * n];
        ob.iter_mut().for_each(|v| *v = proj.bias[o]);
        for c in 0..proj.inputs {
            let w = proj.weight[o * proj.inputs + c];
            for (v, &xv) in ob.iter_mut().zip(x.band(c)) {
                *v += w * xv;
            }
        }
    }
    out
}

fn project_backward(
    x: &FeatureMap,
    dy: &FeatureMap,
    down: &DownsampleParams,
    grad: &mut DownsampleParams,
    need_input_grad: bool,
) -> Option<FeatureMap> {
    let proj = &down.proj;
    let mut dx = need_input_grad.then(|| x.same_shape());
    for o in 0..proj.outputs {
        let db = dy.band(o);
        grad.proj.bias[o] += db.iter().sum::<f64>();
        for c in 0..proj.inputs {
            let idx = o * proj.inputs + c;
            grad.proj.weight[idx] += db.iter().zip(x.band(c)).map(|(g, v)| g * v).sum::<f64>();
            if let Some(dx) = dx.as_mut() {
                let w = proj.weight[idx];
                for (d, g) in dx.band_mut(c).iter_mut().zip(db) {
                    *d += w * g;
                }
            }
        }
    }
    dx
}

/// Per-pixel affine projection from `C` spectral channels to `C_out`.
pub fn spectral_downsample(cube: &HyperCube, down: &DownsampleParams) -> Result<FeatureMap> {
    if down.proj.inputs != cube.channels() {
        return Err(Error::arg(format!(
            "downsampler expects {} channels, cube has {}",
            down.proj.inputs,
            cube.channels()
        )));
    }
    Ok(project(&to_feature_map(cube), down))
}

struct BlockTrace {
    input: FeatureMap,
    hidden: FeatureMap,
    output: FeatureMap,
}

/// Everything the backward pass needs from one forward pass.
pub(crate) struct Trace {
    input: FeatureMap,
    excitation: Option<Excitation>,
    recalibrated: Option<FeatureMap>,
    projected: FeatureMap,
    stem_out: FeatureMap,
    blocks: Vec<BlockTrace>,
    pooled: Vec<f64>,
    pub embedding: Vec<f64>,
}

fn block_forward(block: &ResidualBlock, residual: bool, x: FeatureMap) -> BlockTrace {
    let mut hidden = block.conv1.forward(&x);
    relu_in_place(&mut hidden.data);
    let mut out = block.conv2.forward(&hidden);
    if residual {
        match &block.shortcut {
            Some(sc) => {
                let s = sc.forward(&x);
                out.data.iter_mut().zip(&s.data).for_each(|(o, v)| *o += v);
            }
            None => out.data.iter_mut().zip(&x.data).for_each(|(o, v)| *o += v),
        }
    }
    relu_in_place(&mut out.data);
    BlockTrace {
        input: x,
        hidden,
        output: out,
    }
}

fn check_input(cube: &HyperCube, params: &EmbeddingParams) -> Result<()> {
    if cube.channels() != params.in_channels() {
        return Err(Error::arg(format!(
            "model expects {} channels, cube has {}",
            params.in_channels(),
            cube.channels()
        )));
    }
    Ok(())
}

pub(crate) fn forward_traced(
    cube: &HyperCube,
    params: &EmbeddingParams,
    attention: bool,
) -> Result<Trace> {
    check_input(cube, params)?;
    let input = to_feature_map(cube);
    let (excitation, recalibrated) = if attention {
        let z = squeeze_map(&input, params.config.squeeze);
        let exc = excite_traced(z, &params.se);
        let mut scaled = input.clone();
        for (c, &s) in exc.weights.iter().enumerate() {
            scaled.band_mut(c).iter_mut().for_each(|v| *v *= s);
        }
        (Some(exc), Some(scaled))
    } else {
        (None, None)
    };
    let projected = project(recalibrated.as_ref().unwrap_or(&input), &params.down);

    let bb = &params.backbone;
    let mut stem_out = bb.stem.forward(&projected);
    relu_in_place(&mut stem_out.data);

    let mut blocks = Vec::with_capacity(bb.blocks.len());
    let mut x = stem_out.clone();
    for block in &bb.blocks {
        let t = block_forward(block, bb.residual, x);
        x = t.output.clone();
        blocks.push(t);
    }
    let pooled: Vec<f64> = (0..x.channels)
        .map(|c| x.band(c).iter().sum::<f64>() / x.plane() as f64)
        .collect();
    let embedding = bb.head.forward(&pooled);
    Ok(Trace {
        input,
        excitation,
        recalibrated,
        projected,
        stem_out,
        blocks,
        pooled,
        embedding,
    })
}

/// Accumulates `dL/dparams` for one sample into `grad`, given `dL/dembedding`.
pub(crate) fn backward(
    trace: &Trace,
    d_embedding: &[f64],
    params: &EmbeddingParams,
    grad: &mut EmbeddingParams,
) {
    let bb = &params.backbone;
    let d_pooled = bb
        .head
        .backward(&trace.pooled, d_embedding, &mut grad.backbone.head);

    let last = trace.blocks.last().map_or(&trace.stem_out, |b| &b.output);
    let mut dx = last.same_shape();
    let plane = last.plane() as f64;
    for (c, g) in d_pooled.iter().enumerate() {
        dx.band_mut(c).iter_mut().for_each(|v| *v = g / plane);
    }

    for (i, (block, bt)) in bb.blocks.iter().zip(&trace.blocks).enumerate().rev() {
        let gblock = &mut grad.backbone.blocks[i];
        // through the output relu
        for (d, &o) in dx.data.iter_mut().zip(&bt.output.data) {
            if o <= 0.0 {
                *d = 0.0;
            }
        }
        let mut d_hidden = block.conv2.backward(&bt.hidden, &dx, &mut gblock.conv2);
        for (d, &h) in d_hidden.data.iter_mut().zip(&bt.hidden.data) {
            if h <= 0.0 {
                *d = 0.0;
            }
        }
        let mut d_in = block
            .conv1
            .backward(&bt.input, &d_hidden, &mut gblock.conv1);
        if bb.residual {
            match (&block.shortcut, gblock.shortcut.as_mut()) {
                (Some(sc), Some(gsc)) => {
                    let d_skip = sc.backward(&bt.input, &dx, gsc);
                    d_in.data
                        .iter_mut()
                        .zip(&d_skip.data)
                        .for_each(|(a, b)| *a += b);
                }
                _ => d_in
                    .data
                    .iter_mut()
                    .zip(&dx.data)
                    .for_each(|(a, b)| *a += b),
            }
        }
        dx = d_in;
    }

    for (d, &o) in dx.data.iter_mut().zip(&trace.stem_out.data) {
        if o <= 0.0 {
            *d = 0.0;
        }
    }
    let d_projected = bb
        .stem
        .backward(&trace.projected, &dx, &mut grad.backbone.stem);

    let down_input = trace.recalibrated.as_ref().unwrap_or(&trace.input);
    let d_recal = project_backward(
        down_input,
        &d_projected,
        &params.down,
        &mut grad.down,
        trace.excitation.is_some(),
    );

    if let (Some(exc), Some(d_recal)) = (&trace.excitation, d_recal) {
        // s only enters through the recalibration product; the squeeze
        // descriptor depends on the raw input, not on parameters.
        let ds: Vec<f64> = (0..trace.input.channels)
            .map(|c| {
                d_recal
                    .band(c)
                    .iter()
                    .zip(trace.input.band(c))
                    .map(|(g, x)| g * x)
                    .sum()
            })
            .collect();
        excite_backward(exc, &ds, &params.se, &mut grad.se);
    }
}

/// Embeds one cube into a `D`-dimensional vector.
pub fn embed(cube: &HyperCube, params: &EmbeddingParams, attention: bool) -> Result<Vec<f64>> {
    forward_traced(cube, params, attention).map(|t| t.embedding)
}

/// Channel attention weights the model assigns to `cube`.
pub fn attention_weights(cube: &HyperCube, params: &EmbeddingParams) -> Result<Vec<f64>> {
    check_input(cube, params)?;
    let z = squeeze_map(&to_feature_map(cube), params.config.squeeze);
    Ok(excite_traced(z, &params.se).weights)
}

fn check_batch(cubes: &[&HyperCube]) -> Result<()> {
    if let Some(first) = cubes.first() {
        if let Some(i) = cubes.iter().position(|c| c.channels() != first.channels()) {
            return Err(Error::arg(format!(
                "batch mixes channel counts: cube 0 has {}, cube {i} has {}",
                first.channels(),
                cubes[i].channels()
            )));
        }
    }
    Ok(())
}

/// Embeds every cube; row `i` is `embed(cubes[i])`.
pub fn embed_batch(
    cubes: &[&HyperCube],
    params: &EmbeddingParams,
    attention: bool,
) -> Result<Matrix> {
    check_batch(cubes)?;
    let rows = par::map(cubes, |c| embed(c, params, attention));
    stack(rows, params.embedding_dim())
}

/// Sequential counterpart of [`embed_batch`].
pub fn embed_batch_sequential(
    cubes: &[&HyperCube],
    params: &EmbeddingParams,
    attention: bool,
) -> Result<Matrix> {
    check_batch(cubes)?;
    let rows = par::map_sequential(cubes, |c| embed(c, params, attention));
    stack(rows, params.embedding_dim())
}

fn stack(rows: Vec<Result<Vec<f64>>>, dim: usize) -> Result<Matrix> {
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, dim));
    }
    Matrix::from_rows(&rows)
}
