//! Every differentiable tape op as a small scalar-valued case.

use dva::tensor::{Tape, Tensor, Var};

use super::{randn64, weighted_sum};

pub type Build = fn(&mut Tape<'_, f64>, &[Var], u64) -> dva::Result<Var>;

/// Every differentiable tape op with input shapes, reduced to a scalar.
pub fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Build)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v, s| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, s)
        }),
        ("matmul_sum", vec![vec![3, 4], vec![4, 2]], |t, v, _| {
            let y = t.matmul(v[0], v[1])?;
            Ok(t.sum(y))
        }),
        ("add", vec![vec![2, 3], vec![2, 3]], |t, v, s| {
            let y = t.add(v[0], v[1])?;
            weighted_sum(t, y, s)
        }),
        ("sub", vec![vec![2, 3], vec![2, 3]], |t, v, s| {
            let y = t.sub(v[0], v[1])?;
            weighted_sum(t, y, s)
        }),
        ("mul", vec![vec![2, 3], vec![2, 3]], |t, v, s| {
            let y = t.mul(v[0], v[1])?;
            weighted_sum(t, y, s)
        }),
        ("add_row", vec![vec![3, 4], vec![4]], |t, v, s| {
            let y = t.add_row(v[0], v[1])?;
            weighted_sum(t, y, s)
        }),
        ("scale", vec![vec![2, 3]], |t, v, s| {
            let y = t.scale(v[0], -1.7);
            weighted_sum(t, y, s)
        }),
        ("neg", vec![vec![2, 3]], |t, v, s| {
            let y = t.neg(v[0]);
            weighted_sum(t, y, s)
        }),
        ("gelu", vec![vec![2, 5]], |t, v, s| {
            let y = t.gelu(v[0]);
            weighted_sum(t, y, s)
        }),
        ("transpose", vec![vec![3, 5]], |t, v, s| {
            let y = t.transpose(v[0])?;
            weighted_sum(t, y, s)
        }),
        ("reshape", vec![vec![2, 6]], |t, v, s| {
            let y = t.reshape(v[0], vec![3, 4])?;
            weighted_sum(t, y, s)
        }),
        ("sum", vec![vec![2, 3]], |t, v, s| {
            let y = t.mul(v[0], v[0])?;
            let _ = s;
            Ok(t.sum(y))
        }),
        ("mean", vec![vec![2, 3]], |t, v, _| {
            let y = t.mul(v[0], v[0])?;
            Ok(t.mean(y))
        }),
        ("softmax", vec![vec![3, 4]], |t, v, s| {
            let y = t.softmax(v[0]);
            weighted_sum(t, y, s)
        }),
        ("log_softmax", vec![vec![3, 4]], |t, v, s| {
            let y = t.log_softmax(v[0]);
            weighted_sum(t, y, s)
        }),
        (
            "layer_norm",
            vec![vec![2, 8], vec![8], vec![8]],
            |t, v, s| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-6)?;
                weighted_sum(t, y, s)
            },
        ),
        ("l2_normalize", vec![vec![3, 4]], |t, v, s| {
            let y = t.l2_normalize(v[0])?;
            weighted_sum(t, y, s)
        }),
        ("gather_rows", vec![vec![4, 3]], |t, v, s| {
            let y = t.gather_rows(v[0], &[2, 0, 2])?;
            weighted_sum(t, y, s)
        }),
        ("concat_rows", vec![vec![2, 3], vec![1, 3]], |t, v, s| {
            let y = t.concat_rows(&[v[0], v[1]])?;
            weighted_sum(t, y, s)
        }),
        ("concat_cols", vec![vec![2, 3], vec![2, 2]], |t, v, s| {
            let y = t.concat_cols(&[v[0], v[1]])?;
            weighted_sum(t, y, s)
        }),
        ("slice_cols", vec![vec![3, 6]], |t, v, s| {
            let y = t.slice_cols(v[0], 2, 3)?;
            weighted_sum(t, y, s)
        }),
        (
            "pairwise_sq_dist",
            vec![vec![3, 4], vec![5, 4]],
            |t, v, s| {
                let y = t.pairwise_sq_dist(v[0], v[1])?;
                weighted_sum(t, y, s)
            },
        ),
        ("pick_per_row", vec![vec![3, 4]], |t, v, s| {
            let y = t.pick_per_row(v[0], &[1, 3, 0])?;
            weighted_sum(t, y, s)
        }),
        (
            "attention_chain",
            vec![vec![4, 8], vec![8, 8], vec![8, 8]],
            |t, v, s| {
                // scores = softmax(x Wq (x Wk)^T / sqrt 8) x
                let q = t.matmul(v[0], v[1])?;
                let k = t.matmul(v[0], v[2])?;
                let kt = t.transpose(k)?;
                let sc = t.matmul(q, kt)?;
                let sc = t.scale(sc, 1.0 / 8f64.sqrt());
                let a = t.softmax(sc);
                let y = t.matmul(a, v[0])?;
                weighted_sum(t, y, s)
            },
        ),
    ]
}

pub fn inputs_for(shapes: &[Vec<usize>], seed: u64) -> Vec<Tensor<f64>> {
    shapes
        .iter()
        .enumerate()
        .map(|(i, s)| randn64(s, 1000 * seed + i as u64, 1.0))
        .collect()
}
