//! Gradient checks for every differentiable op on small random inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{grad_check, AttnMask, GradCheckOptions, GradCheckReport, Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// Reduces any tensor to a scalar through fixed pseudo-random weights so
/// that every output coordinate contributes a distinct gradient.
fn weighted_sum(g: &mut Graph, x: Var) -> Result<Var> {
    let n = g.value(x).len();
    let w: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.7 + 0.3).sin()).collect();
    let wv = g.constant(g.shape(x).to_vec().as_slice(), w)?;
    let p = g.mul(x, wv)?;
    Ok(g.sum(p))
}

fn case(name: &'static str, shapes: &[&[usize]], f: OpFn) -> (&'static str, Vec<Vec<usize>>, OpFn) {
    (name, shapes.iter().map(|s| s.to_vec()).collect(), f)
}

pub fn op_suite(opts: GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    let cases: Vec<(&'static str, Vec<Vec<usize>>, OpFn)> = vec![
        case("matmul", &[&[3, 4], &[4, 2]], Box::new(|g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y)
        })),
        case("linear[2,3,4]x[4,5]", &[&[2, 3, 4], &[4, 5]], Box::new(|g, v| {
            let y = g.linear(v[0], v[1])?;
            weighted_sum(g, y)
        })),
        case("transpose", &[&[3, 5]], Box::new(|g, v| {
            let y = g.transpose(v[0])?;
            weighted_sum(g, y)
        })),
        case("add", &[&[2, 3], &[2, 3]], Box::new(|g, v| {
            let y = g.add(v[0], v[1])?;
            weighted_sum(g, y)
        })),
        case("sub", &[&[2, 3], &[2, 3]], Box::new(|g, v| {
            let y = g.sub(v[0], v[1])?;
            weighted_sum(g, y)
        })),
        case("mul", &[&[2, 3], &[2, 3]], Box::new(|g, v| {
            let y = g.mul(v[0], v[1])?;
            weighted_sum(g, y)
        })),
        case("add_row", &[&[2, 3, 4], &[4]], Box::new(|g, v| {
            let y = g.add_row(v[0], v[1])?;
            weighted_sum(g, y)
        })),
        case("mul_row", &[&[3, 4], &[4]], Box::new(|g, v| {
            let y = g.mul_row(v[0], v[1])?;
            weighted_sum(g, y)
        })),
        case("scale", &[&[5]], Box::new(|g, v| {
            let y = g.scale(v[0], -1.7);
            weighted_sum(g, y)
        })),
        case("tanh", &[&[6]], Box::new(|g, v| {
            let y = g.tanh(v[0]);
            weighted_sum(g, y)
        })),
        case("gelu", &[&[6]], Box::new(|g, v| {
            let y = g.gelu(v[0]);
            weighted_sum(g, y)
        })),
        case("softmax", &[&[3, 5]], Box::new(|g, v| {
            let y = g.softmax(v[0])?;
            weighted_sum(g, y)
        })),
        case("layer_norm", &[&[2, 8], &[8], &[8]], Box::new(|g, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            weighted_sum(g, y)
        })),
        case("attention(full)", &[&[2, 4, 6], &[2, 4, 6], &[2, 4, 6]], Box::new(|g, v| {
            let y = g.attention(v[0], v[1], v[2], 2, AttnMask::Full)?;
            weighted_sum(g, y)
        })),
        case("attention(causal,prefix=2)", &[&[2, 5, 4], &[2, 5, 4], &[2, 5, 4]], Box::new(|g, v| {
            let y = g.attention(v[0], v[1], v[2], 2, AttnMask::Causal { prefix: 2 })?;
            weighted_sum(g, y)
        })),
        case("concat_seq", &[&[2, 1, 3], &[2, 2, 3]], Box::new(|g, v| {
            let y = g.concat_seq(&[v[0], v[1], v[0]])?;
            weighted_sum(g, y)
        })),
        case("slice_seq", &[&[2, 5, 3]], Box::new(|g, v| {
            let y = g.slice_seq(v[0], 1, 3)?;
            weighted_sum(g, y)
        })),
        case("expand", &[&[2, 3]], Box::new(|g, v| {
            let y = g.expand(v[0], 3);
            weighted_sum(g, y)
        })),
        case("reshape", &[&[2, 6]], Box::new(|g, v| {
            let y = g.reshape(v[0], &[3, 4])?;
            weighted_sum(g, y)
        })),
        case("gather", &[&[5, 3]], Box::new(|g, v| {
            let y = g.gather(v[0], &[4, 0, 4, 2])?;
            weighted_sum(g, y)
        })),
        case("mean", &[&[7]], Box::new(|g, v| {
            let y = g.mul(v[0], v[0])?;
            Ok(g.mean(y))
        })),
        case("cosine_rows", &[&[3, 4], &[3, 4]], Box::new(|g, v| {
            let y = g.cosine_rows(v[0], v[1])?;
            weighted_sum(g, y)
        })),
        case("bce_with_logits", &[&[4, 1]], Box::new(|g, v| {
            g.bce_with_logits(v[0], &[1.0, 0.0, 0.0, 1.0])
        })),
        case("diversity_loss", &[&[2, 3, 6]], Box::new(|g, v| {
            let t = [Some(1), Some(0), None, Some(5), Some(2), Some(2)];
            Ok(g.diversity_loss(v[0], &t, 0.1, 1e-10)?.0)
        })),
    ];

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut reports = Vec::with_capacity(cases.len());
    for (name, shapes, f) in cases {
        let params: Vec<Tensor> = shapes.iter().map(|s| Tensor::randn(s, 1.0, &mut rng)).collect();
        reports.push(grad_check(name, &params, opts, |g, v| f(g, v))?);
    }
    Ok(reports)
}
