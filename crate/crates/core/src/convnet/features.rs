use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::net::Net;
use super::tensor::{Scalar, Tensor};
use super::NetError;
use crate::augment::{crop, Rect};
use crate::dataset_store::minmax_normalize;
use crate::depth_render::DepthImage;

/// Input preprocessing applied before the network sees an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preproc {
    #[default]
    Raw,
    #[serde(alias = "normalized")]
    MinMax,
}

impl Preproc {
    pub fn name(self) -> &'static str {
        match self {
            Preproc::Raw => "raw",
            Preproc::MinMax => "minmax",
        }
    }
}

impl std::str::FromStr for Preproc {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "raw" => Ok(Preproc::Raw),
            "minmax" | "normalized" => Ok(Preproc::MinMax),
            _ => Err(format!("unknown preprocessing `{s}` (expected raw or minmax)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f32>,
    pub layer_name: String,
    pub dim: usize,
}

/// Resizes `img` to the net input size, optionally min-max normalizes it, and
/// scales gray levels to `[0, 1]`.
pub fn image_to_input<T: Scalar>(img: &DepthImage, preproc: Preproc, input: [usize; 3]) -> Result<Vec<T>, NetError> {
    let [c, h, w] = input;
    if c != 1 {
        return Err(NetError::ShapeMismatch(format!("depth images have 1 channel, net expects {c}")));
    }
    let resized;
    let mut img = img;
    if img.width != w || img.height != h {
        resized = crop(img, Rect::full(img), w, h)?;
        img = &resized;
    }
    let normalized;
    if preproc == Preproc::MinMax {
        normalized = minmax_normalize(img);
        img = &normalized;
    }
    Ok(img.gray.iter().map(|&g| T::from_f64(g as f64 / 255.0)).collect())
}

fn tap_index<T: Scalar>(net: &Net<T>, layer: &str) -> Result<usize, NetError> {
    if !net.spec.taps.iter().any(|t| t == layer) {
        return Err(NetError::UnknownLayer(layer.to_string()));
    }
    net.spec
        .layer_index(layer)
        .ok_or_else(|| NetError::UnknownLayer(layer.to_string()))
}

pub fn extract_features<T: Scalar>(
    net: &Net<T>,
    img: &DepthImage,
    layer: &str,
    preproc: Preproc,
) -> Result<FeatureVector, NetError> {
    Ok(extract_batch(net, std::slice::from_ref(img), layer, preproc)?.remove(0))
}

const EXTRACT_SHARD: usize = 16;

/// Features for many images; shards run in parallel, output order matches input.
pub fn extract_batch<T: Scalar>(
    net: &Net<T>,
    images: &[DepthImage],
    layer: &str,
    preproc: Preproc,
) -> Result<Vec<FeatureVector>, NetError> {
    let idx = tap_index(net, layer)?;
    let dim: usize = net.output_shape(idx).iter().product();
    let input = net.spec.input;
    let per: usize = input.iter().product();
    let shards: Vec<Vec<FeatureVector>> = images
        .par_chunks(EXTRACT_SHARD)
        .map(|chunk| {
            let mut data = Vec::with_capacity(chunk.len() * per);
            for img in chunk {
                data.extend(image_to_input::<T>(img, preproc, input)?);
            }
            let x = Tensor::from_vec(&[chunk.len(), input[0], input[1], input[2]], data);
            let cache = net.forward_until(&x, None, Some(idx))?;
            Ok(cache.acts[idx + 1]
                .chunks(dim)
                .map(|v| FeatureVector {
                    values: v.iter().map(|&x| Scalar::to_f64(x) as f32).collect(),
                    layer_name: layer.to_string(),
                    dim,
                })
                .collect())
        })
        .collect::<Result<_, NetError>>()?;
    Ok(shards.into_iter().flatten().collect())
}
