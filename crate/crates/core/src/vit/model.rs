use super::{HeadType, ParamVars, ShapeConfig};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

const LN_EPS: f64 = 1e-6;

/// Cut `images[b, res, res, c]` into non-overlapping patches.
///
/// Output is `[b, (res/p)², p·p·c]`; patches are in raster order and each
/// patch is flattened row-major over pixels, then channel.
pub fn patchify(images: &Tensor, patch_size: usize) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 || s[1] != s[2] {
        return Err(Error::Shape(format!("expected [b, res, res, c] images, got {s:?}")));
    }
    let (b, res, c) = (s[0], s[1], s[3]);
    if patch_size == 0 || res % patch_size != 0 {
        return Err(Error::Shape(format!("resolution {res} is not divisible by patch size {patch_size}")));
    }
    let grid = res / patch_size;
    let t = grid * grid;
    let pd = patch_size * patch_size * c;
    let src = images.data();
    let mut out = Vec::with_capacity(b * t * pd);
    for n in 0..b {
        for gy in 0..grid {
            for gx in 0..grid {
                for py in 0..patch_size {
                    let y = gy * patch_size + py;
                    let row = ((n * res + y) * res + gx * patch_size) * c;
                    out.extend_from_slice(&src[row..row + patch_size * c]);
                }
            }
        }
    }
    Tensor::new(vec![b, t, pd], out)
}

/// Outputs of [`forward`].
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub logits: Var,
    pub features: Var,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    /// Reorder the token sequence (including a class token, if any) right
    /// before the first encoder block. Used to probe permutation invariance.
    pub token_permutation: Option<Vec<usize>>,
}

/// Tape handles of the MAP head.
#[derive(Debug, Clone, Copy)]
pub struct MapVars {
    pub query: Var,
    pub q_kernel: Var,
    pub q_bias: Var,
    pub kv_kernel: Var,
    pub kv_bias: Var,
    pub out_kernel: Var,
    pub out_bias: Var,
    /// `(ln scale, ln bias, fc1 kernel, fc1 bias, fc2 kernel, fc2 bias)`.
    pub mlp: Option<[Var; 6]>,
}

impl MapVars {
    pub fn from_params(vars: &ParamVars, with_mlp: bool) -> Result<Self> {
        let mlp = if with_mlp {
            Some([
                vars.get("map/ln/scale")?,
                vars.get("map/ln/bias")?,
                vars.get("map/mlp/fc1/kernel")?,
                vars.get("map/mlp/fc1/bias")?,
                vars.get("map/mlp/fc2/kernel")?,
                vars.get("map/mlp/fc2/bias")?,
            ])
        } else {
            None
        };
        Ok(MapVars {
            query: vars.get("map/query")?,
            q_kernel: vars.get("map/attn/q/kernel")?,
            q_bias: vars.get("map/attn/q/bias")?,
            kv_kernel: vars.get("map/attn/kv/kernel")?,
            kv_bias: vars.get("map/attn/kv/bias")?,
            out_kernel: vars.get("map/attn/out/kernel")?,
            out_bias: vars.get("map/attn/out/bias")?,
            mlp,
        })
    }
}

fn dense(tape: &mut Tape, x: Var, kernel: Var, bias: Var) -> Result<Var> {
    let y = tape.matmul(x, kernel)?;
    tape.add(y, bias)
}

fn dense_named(tape: &mut Tape, vars: &ParamVars, x: Var, prefix: &str) -> Result<Var> {
    dense(tape, x, vars.get(&format!("{prefix}/kernel"))?, vars.get(&format!("{prefix}/bias"))?)
}

fn norm_named(tape: &mut Tape, vars: &ParamVars, x: Var, prefix: &str) -> Result<Var> {
    tape.layer_norm(x, vars.get(&format!("{prefix}/scale"))?, vars.get(&format!("{prefix}/bias"))?, LN_EPS)
}

/// `[b, t, h·dh] -> [b·h, t, dh]`
fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, t, w) = (s[0], s[1], s[2]);
    let dh = w / heads;
    let x = tape.reshape(x, &[b, t, heads, dh])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[b * heads, t, dh])
}

/// `[b·h, t, dh] -> [b, t, h·dh]`
fn merge_heads(tape: &mut Tape, x: Var, batch: usize, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (t, dh) = (s[1], s[2]);
    let x = tape.reshape(x, &[batch, heads, t, dh])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[batch, t, heads * dh])
}

/// Scaled dot-product attention over `[g, tq, dh]` queries and `[g, tk, dh]`
/// keys/values.
fn attend(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let dh = tape.shape(q)[2];
    let kt = tape.transpose(k)?;
    let scores = tape.bmm(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let weights = tape.softmax(scores, 2)?;
    tape.bmm(weights, v)
}

fn self_attention(tape: &mut Tape, vars: &ParamVars, x: Var, prefix: &str, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, t, w) = (s[0], s[1], s[2]);
    let qkv = dense_named(tape, vars, x, &format!("{prefix}/qkv"))?;
    let mut parts = [qkv; 3];
    for (i, part) in parts.iter_mut().enumerate() {
        let sl = tape.slice(qkv, 2, i * w, w)?;
        *part = split_heads(tape, sl, heads)?;
    }
    let [q, k, v] = parts;
    let ctx = attend(tape, q, k, v)?;
    let ctx = merge_heads(tape, ctx, b, heads)?;
    debug_assert_eq!(tape.shape(ctx), [b, t, w]);
    dense_named(tape, vars, ctx, &format!("{prefix}/out"))
}

fn mlp(tape: &mut Tape, x: Var, fc1: (Var, Var), fc2: (Var, Var)) -> Result<Var> {
    let h = dense(tape, x, fc1.0, fc1.1)?;
    let h = tape.gelu(h);
    dense(tape, h, fc2.0, fc2.1)
}

/// Multihead attention pooling: one learned query attends over all
/// `tokens[b, t, w]`, followed by the output projection. Returns `[b, w]`.
pub fn map_pool(tape: &mut Tape, tokens: Var, map: &MapVars, heads: usize) -> Result<Var> {
    let s = tape.shape(tokens).to_vec();
    if s.len() != 3 {
        return Err(Error::Shape(format!("map_pool expects [b, t, w] tokens, got {s:?}")));
    }
    let (b, w) = (s[0], s[2]);
    if heads == 0 || w % heads != 0 {
        return Err(Error::Shape(format!("width {w} is not divisible by {heads} heads")));
    }
    let query = tape.reshape(map.query, &[1, w])?;
    let q = dense(tape, query, map.q_kernel, map.q_bias)?;
    let q = tape.expand(q, b)?; // [b, 1, w]
    let q = split_heads(tape, q, heads)?;

    let kv = dense(tape, tokens, map.kv_kernel, map.kv_bias)?;
    let k = tape.slice(kv, 2, 0, w)?;
    let v = tape.slice(kv, 2, w, w)?;
    let k = split_heads(tape, k, heads)?;
    let v = split_heads(tape, v, heads)?;

    let ctx = attend(tape, q, k, v)?;
    let ctx = merge_heads(tape, ctx, b, heads)?;
    let ctx = tape.reshape(ctx, &[b, w])?;
    let mut y = dense(tape, ctx, map.out_kernel, map.out_bias)?;
    if let Some([ln_s, ln_b, k1, b1, k2, b2]) = map.mlp {
        let h = tape.layer_norm(y, ln_s, ln_b, LN_EPS)?;
        let h = mlp(tape, h, (k1, b1), (k2, b2))?;
        y = tape.add(y, h)?;
    }
    Ok(y)
}

pub fn forward(tape: &mut Tape, vars: &ParamVars, images: &Tensor, shape: &ShapeConfig) -> Result<Forward> {
    forward_with(tape, vars, images, shape, &ForwardOptions::default())
}

/// Pre-LN encoder, final layer norm, pooling head, then a single linear
/// classifier on the pooled features.
pub fn forward_with(
    tape: &mut Tape,
    vars: &ParamVars,
    images: &Tensor,
    shape: &ShapeConfig,
    opts: &ForwardOptions,
) -> Result<Forward> {
    shape.validate()?;
    let s = images.shape();
    if s.len() != 4 || s[1] != shape.image_res || s[2] != shape.image_res || s[3] != shape.channels {
        return Err(Error::Shape(format!(
            "images {s:?} do not match {}x{}x{}",
            shape.image_res, shape.image_res, shape.channels
        )));
    }
    let b = s[0];
    let w = shape.width;

    let patches = tape.constant(patchify(images, shape.patch_size)?);
    let mut x = dense_named(tape, vars, patches, "embed")?;
    if shape.head_type == HeadType::Cls {
        let cls = vars.get("cls")?;
        let cls = tape.reshape(cls, &[1, w])?;
        let cls = tape.expand(cls, b)?;
        x = tape.concat(&[cls, x], 1)?;
    }
    x = tape.add(x, vars.get("pos_embedding")?)?;

    if let Some(perm) = &opts.token_permutation {
        let t = tape.shape(x)[1];
        let mut sorted = perm.clone();
        sorted.sort_unstable();
        if sorted != (0..t).collect::<Vec<_>>() {
            return Err(Error::Shape(format!("token permutation is not a permutation of 0..{t}")));
        }
        let pieces = perm.iter().map(|&i| tape.slice(x, 1, i, 1)).collect::<Result<Vec<_>>>()?;
        x = tape.concat(&pieces, 1)?;
    }

    for i in 0..shape.depth {
        let p = format!("block{i}");
        let h = norm_named(tape, vars, x, &format!("{p}/ln1"))?;
        let h = self_attention(tape, vars, h, &format!("{p}/attn"), shape.heads)?;
        x = tape.add(x, h)?;
        let h = norm_named(tape, vars, x, &format!("{p}/ln2"))?;
        let fc1 = (vars.get(&format!("{p}/mlp/fc1/kernel"))?, vars.get(&format!("{p}/mlp/fc1/bias"))?);
        let fc2 = (vars.get(&format!("{p}/mlp/fc2/kernel"))?, vars.get(&format!("{p}/mlp/fc2/bias"))?);
        let h = mlp(tape, h, fc1, fc2)?;
        x = tape.add(x, h)?;
    }
    let x = norm_named(tape, vars, x, "encoder_norm")?;

    let features = match shape.head_type {
        HeadType::Cls => {
            let first = tape.slice(x, 1, 0, 1)?;
            tape.reshape(first, &[b, w])?
        }
        HeadType::Gap => tape.mean(x, 1)?,
        HeadType::Map => {
            let map = MapVars::from_params(vars, shape.map_mlp)?;
            map_pool(tape, x, &map, shape.heads)?
        }
    };
    let logits = dense_named(tape, vars, features, "head")?;
    Ok(Forward { logits, features })
}
