//! Squeeze, excitation and recalibration over raw spectral channels.

use super::layers::{relu_in_place, sigmoid, FeatureMap};
use super::params::{SEParams, SqueezeMode};
use crate::cubeio::HyperCube;
use crate::error::{Error, Result};

pub(crate) fn squeeze_band(band: &[f64], mode: SqueezeMode) -> f64 {
    let mean = band.iter().sum::<f64>() / band.len() as f64;
    match mode {
        SqueezeMode::Mean => mean,
        SqueezeMode::MeanMax => {
            let max = band.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            0.5 * (mean + max)
        }
    }
}

pub(crate) fn squeeze_map(x: &FeatureMap, mode: SqueezeMode) -> Vec<f64> {
    (0..x.channels)
        .map(|c| squeeze_band(x.band(c), mode))
        .collect()
}

fn squeeze_cube(cube: &HyperCube, mode: SqueezeMode) -> Vec<f64> {
    cube.bands()
        .map(|b| {
            let band: Vec<f64> = b.iter().map(|&v| f64::from(v)).collect();
            squeeze_band(&band, mode)
        })
        .collect()
}

/// Per-channel descriptor: the average of the spatial mean and spatial max.
pub fn se_squeeze(cube: &HyperCube) -> Vec<f64> {
    squeeze_cube(cube, SqueezeMode::MeanMax)
}

/// Per-channel spatial mean.
pub fn se_squeeze_avg_only(cube: &HyperCube) -> Vec<f64> {
    squeeze_cube(cube, SqueezeMode::Mean)
}

/// Intermediate values of one excitation pass, kept for backprop.
#[derive(Debug, Clone)]
pub(crate) struct Excitation {
    pub z: Vec<f64>,
    pub hidden: Vec<f64>,
    pub weights: Vec<f64>,
}

pub(crate) fn excite_traced(z: Vec<f64>, se: &SEParams) -> Excitation {
    let mut hidden = se.reduce.forward(&z);
    relu_in_place(&mut hidden);
    let weights = se
        .expand
        .forward(&hidden)
        .into_iter()
        .map(sigmoid)
        .collect();
    Excitation { z, hidden, weights }
}

/// Channel attention weights `logistic(W2 relu(W1 z + b1) + b2)`.
pub fn se_excite(z: &[f64], se: &SEParams) -> Result<Vec<f64>> {
    if z.len() != se.reduce.inputs
        || se.expand.inputs != se.reduce.outputs
        || se.expand.outputs != z.len()
    {
        return Err(Error::arg(format!(
            "descriptor of length {} does not fit excitation layers {}->{}->{}",
            z.len(),
            se.reduce.inputs,
            se.reduce.outputs,
            se.expand.outputs
        )));
    }
    Ok(excite_traced(z.to_vec(), se).weights)
}

/// Scales channel `c` of the cube by `s[c]`.
pub fn se_recalibrate(cube: &HyperCube, s: &[f64]) -> Result<HyperCube> {
    if s.len() != cube.channels() {
        return Err(Error::arg(format!(
            "{} attention weights for {} channels",
            s.len(),
            cube.channels()
        )));
    }
    let scales: Vec<f32> = s.iter().map(|&v| v as f32).collect();
    cube.scale_channels(&scales)
}

/// Accumulates excitation gradients given `dL/ds`.
pub(crate) fn excite_backward(trace: &Excitation, ds: &[f64], se: &SEParams, grad: &mut SEParams) {
    let da: Vec<f64> = ds
        .iter()
        .zip(&trace.weights)
        .map(|(g, s)| g * s * (1.0 - s))
        .collect();
    let mut dh = se.expand.backward(&trace.hidden, &da, &mut grad.expand);
    for (g, &h) in dh.iter_mut().zip(&trace.hidden) {
        if h <= 0.0 {
            *g = 0.0;
        }
    }
    se.reduce.backward(&trace.z, &dh, &mut grad.reduce);
}
