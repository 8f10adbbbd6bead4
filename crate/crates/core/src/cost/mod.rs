//! Analytic parameter, FLOP and memory accounting for ViT shapes.

mod memory;
mod shapefind;
mod table;

pub use memory::{memory_report, MemoryModel, MemoryReport, GIB};
pub use shapefind::{shapefind, GridSpec, ShapefindRow};
pub use table::{load_table2, parse_table2, ShapeRow};

use indexmap::IndexMap;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::optim::OptimizerMode;
use crate::vit::{HeadType, ShapeConfig};

/// Hardware pads the token axis to a multiple of this.
pub const TOKEN_PAD: usize = 128;

/// `(tokens, padded)` at resolution `res`; padding rounds up to
/// [`TOKEN_PAD`].
pub fn tokens_and_padding(shape: &ShapeConfig, res: usize, with_class_token: bool) -> Result<(usize, usize)> {
    if shape.patch_size == 0 || !res.is_multiple_of(shape.patch_size) {
        return Err(Error::Shape(format!("resolution {res} is not divisible by patch size {}", shape.patch_size)));
    }
    let side = res / shape.patch_size;
    let tokens = side * side + usize::from(with_class_token);
    Ok((tokens, tokens.div_ceil(TOKEN_PAD) * TOKEN_PAD))
}

/// Tokens at `res`, flooring partial patches (384 px is not a multiple of
/// 14 or 28; the border is cropped).
fn patch_tokens_at(shape: &ShapeConfig, res: usize) -> usize {
    let side = res / shape.patch_size;
    side * side
}

fn map_head_params(shape: &ShapeConfig) -> usize {
    let w = shape.width;
    let mut n = w + 4 * (w * w + w);
    if shape.map_mlp {
        n += 2 * w + 2 * w * shape.mlp_width + shape.mlp_width + w;
    }
    n
}

/// `(body, head)` parameter counts. The body includes the class token and
/// its positional slot when the head type is CLS; the head is the MAP block
/// (if any) plus the linear classifier.
pub fn count_params(shape: &ShapeConfig) -> (usize, usize) {
    let w = shape.width;
    let m = shape.mlp_width;
    let cls = usize::from(shape.head_type == HeadType::Cls);
    let embed = shape.patch_dim() * w + w;
    let pos = (shape.patch_tokens() + cls) * w;
    let block = 3 * (w * w + w) + (w * w + w) + (2 * w * m + m + w) + 4 * w;
    let body = embed + cls * w + pos + shape.depth * block + 2 * w;
    let map = if shape.head_type == HeadType::Map { map_head_params(shape) } else { 0 };
    (body, map + w * shape.num_classes + shape.num_classes)
}

/// Multiply-accumulates for one image at resolution `res`: patch embedding,
/// encoder blocks (projections, attention scores and values, MLP) and the
/// pooling head. The linear classifier is not counted.
pub fn count_macs(shape: &ShapeConfig, res: usize) -> u64 {
    let w = shape.width as u64;
    let m = shape.mlp_width as u64;
    let cls = u64::from(shape.head_type == HeadType::Cls);
    let t = patch_tokens_at(shape, res) as u64 + cls;
    let embed = (t - cls) * shape.patch_dim() as u64 * w;
    let block = 4 * t * w * w + 2 * t * t * w + 2 * t * w * m;
    let pool = match shape.head_type {
        HeadType::Map => {
            let mut macs = w * w + 2 * t * w * w + 2 * t * w + w * w;
            if shape.map_mlp {
                macs += 2 * w * m;
            }
            macs
        }
        HeadType::Cls | HeadType::Gap => 0,
    };
    embed + shape.depth as u64 * block + pool
}

/// `2 · count_macs`.
pub fn count_flops(shape: &ShapeConfig, res: usize) -> u64 {
    2 * count_macs(shape, res)
}

/// Everything the cost model knows about one shape.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub shape: ShapeConfig,
    pub res: usize,
    pub body_params: usize,
    pub head_params: usize,
    pub macs: u64,
    pub flops: u64,
    pub tokens: usize,
    pub padded_tokens: usize,
    pub memory: IndexMap<String, MemoryReport>,
}

pub fn cost_report(
    shape: &ShapeConfig,
    res: usize,
    batch: usize,
    modes: &[OptimizerMode],
    model: &MemoryModel,
) -> Result<CostReport> {
    shape.validate()?;
    let (tokens, padded_tokens) = tokens_and_padding(shape, res, shape.head_type == HeadType::Cls)?;
    let (body_params, head_params) = count_params(shape);
    let macs = count_macs(shape, res);
    let memory = modes
        .iter()
        .map(|&mode| Ok((mode.to_string(), memory_report(shape, mode, batch, model)?)))
        .collect::<Result<_>>()?;
    Ok(CostReport {
        shape: shape.clone(),
        res,
        body_params,
        head_params,
        macs,
        flops: 2 * macs,
        tokens,
        padded_tokens,
        memory,
    })
}
