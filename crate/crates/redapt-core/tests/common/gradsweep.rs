//! One-call gradient sweep: every differentiable op, the adaptor block,
//! and a full transformer layer, finite-difference checked over a seed
//! range. The per-op suite runs these as separate tests for sharper
//! failure attribution; the acceptance gate calls this to cover the same
//! ground inside a single criterion.

use redapt_core::autodiff::{DropoutKey, NodeId, Tape, LAYERNORM_DEFAULT_EPS};
use redapt_core::nn::{transformer_layer_forward, TrainMode, TransformerLayerNodes};
use redapt_core::redapt::{redapt_forward, RedAptNodes, RedAptSpec, ReductionSpec};
use redapt_core::tensor::Tensor;

use super::{check_gradients, uniform_tensor, weighted_scalar};

/// A boxed graph builder: takes the tape and the leaf ids, returns the
/// scalar loss node.
type OpBuilder = Box<dyn Fn(&mut Tape, &[NodeId]) -> redapt_core::Result<NodeId>>;

/// Runs the whole sweep; returns the number of (case, seed) checks done.
/// Panics, via `check_gradients`, on the first mismatch.
pub fn sweep_everything(seeds: std::ops::Range<u64>) -> usize {
    let mut cases = 0usize;
    for seed in seeds {
        cases += sweep_ops(seed);
        sweep_block(seed);
        sweep_layer(seed);
        cases += 2;
    }
    cases
}

fn sweep_ops(seed: u64) -> usize {
    let mut n = 0usize;
    let mut run = |label: &str, inputs: Vec<Tensor>, f: OpBuilder| {
        check_gradients(&format!("{label} seed {seed}"), &inputs, |t, ids| f(t, ids));
        n += 1;
    };

    run(
        "add",
        vec![
            uniform_tensor(&[2, 3], -1.0, 1.0, &[seed, 1]),
            uniform_tensor(&[2, 3], -1.0, 1.0, &[seed, 2]),
        ],
        Box::new(move |t, ids| {
            let y = t.add(ids[0], ids[1])?;
            weighted_scalar(t, y, seed)
        }),
    );
    run(
        "mul",
        vec![
            uniform_tensor(&[2, 3], -1.0, 1.0, &[seed, 3]),
            uniform_tensor(&[2, 3], -1.0, 1.0, &[seed, 4]),
        ],
        Box::new(move |t, ids| {
            let y = t.mul(ids[0], ids[1])?;
            weighted_scalar(t, y, seed)
        }),
    );
    run(
        "scale",
        vec![uniform_tensor(&[2, 4], -1.0, 1.0, &[seed, 5])],
        Box::new(move |t, ids| {
            let y = t.scale(ids[0], -0.7);
            weighted_scalar(t, y, seed)
        }),
    );
    run(
        "bias_add",
        vec![
            uniform_tensor(&[3, 4], -1.0, 1.0, &[seed, 6]),
            uniform_tensor(&[4], -1.0, 1.0, &[seed, 7]),
        ],
        Box::new(move |t, ids| {
            let y = t.bias_add(ids[0], ids[1])?;
            weighted_scalar(t, y, seed)
        }),
    );
    run(
        "matmul plain",
        vec![
            uniform_tensor(&[3, 4], -1.0, 1.0, &[seed, 8]),
            uniform_tensor(&[4, 2], -1.0, 1.0, &[seed, 9]),
        ],
        Box::new(move |t, ids| {
            let y = t.matmul(ids[0], ids[1])?;
            weighted_scalar(t, y, seed)
        }),
    );
    run(
        "matmul shared",
        vec![
            uniform_tensor(&[2, 3, 4], -1.0, 1.0, &[seed, 10]),
            uniform_tensor(&[4, 2], -1.0, 1.0, &[seed, 11]),
        ],
        Box::new(move |t, ids| {
            let y = t.matmul(ids[0], ids[1])?;
            weighted_scalar(t, y, seed)
        }),
    );
    run(
        "matmul batched",
        vec![
            uniform_tensor(&[2, 3, 4], -1.0, 1.0, &[seed, 12]),
            uniform_tensor(&[2, 4, 3], -1.0, 1.0, &[seed, 13]),
        ],
        Box::new(move |t, ids| {
            let y = t.matmul(ids[0], ids[1])?;
            weighted_scalar(t, y, seed)
        }),
    );
    run(
        "transpose",
        vec![uniform_tensor(&[2, 3, 4], -1.0, 1.0, &[seed, 14])],
        Box::new(move |t, ids| {
            let y = t.transpose(ids[0], 1, 2)?;
            weighted_scalar(t, y, seed)
        }),
    );
    run(
        "reshape",
        vec![uniform_tensor(&[2, 6], -1.0, 1.0, &[seed, 15])],
        Box::new(move |t, ids| {
            let y = t.reshape(ids[0], vec![3, 4])?;
            weighted_scalar(t, y, seed)
        }),
    );
    run(
        "conv1d strided",
        vec![
            uniform_tensor(&[2, 7, 3], -1.0, 1.0, &[seed, 16]),
            uniform_tensor(&[3, 3, 2], -1.0, 1.0, &[seed, 17]),
            uniform_tensor(&[2], -1.0, 1.0, &[seed, 18]),
        ],
        Box::new(move |t, ids| {
            let spec = ReductionSpec { kernel: 3, stride: 2, padding: 1 };
            let y = t.conv1d(ids[0], ids[1], ids[2], &spec)?;
            weighted_scalar(t, y, seed)
        }),
    );
    run(
        "conv1d preserving",
        vec![
            uniform_tensor(&[2, 5, 3], -1.0, 1.0, &[seed, 19]),
            uniform_tensor(&[3, 3, 3], -1.0, 1.0, &[seed, 20]),
            uniform_tensor(&[3], -1.0, 1.0, &[seed, 21]),
        ],
        Box::new(move |t, ids| {
            let spec = ReductionSpec { kernel: 3, stride: 1, padding: 1 };
            let y = t.conv1d(ids[0], ids[1], ids[2], &spec)?;
            weighted_scalar(t, y, seed)
        }),
    );
    run(
        "layernorm",
        vec![
            uniform_tensor(&[3, 5], -1.0, 1.0, &[seed, 22]),
            uniform_tensor(&[5], 0.5, 1.5, &[seed, 23]),
            uniform_tensor(&[5], -0.5, 0.5, &[seed, 24]),
        ],
        Box::new(move |t, ids| {
            let y = t.layernorm(ids[0], ids[1], ids[2], LAYERNORM_DEFAULT_EPS)?;
            weighted_scalar(t, y, seed)
        }),
    );
    run(
        "gelu",
        vec![uniform_tensor(&[3, 5], -3.0, 3.0, &[seed, 25])],
        Box::new(move |t, ids| {
            let y = t.gelu(ids[0]);
            weighted_scalar(t, y, seed)
        }),
    );
    run(
        "softmax",
        vec![uniform_tensor(&[3, 5], -2.0, 2.0, &[seed, 26])],
        Box::new(move |t, ids| {
            let y = t.softmax_lastaxis(ids[0])?;
            weighted_scalar(t, y, seed)
        }),
    );
    run(
        "mean_axis",
        vec![uniform_tensor(&[2, 4, 3], -1.0, 1.0, &[seed, 27])],
        Box::new(move |t, ids| {
            let y = t.mean_axis(ids[0], 1)?;
            weighted_scalar(t, y, seed)
        }),
    );
    run(
        "sum_all",
        vec![uniform_tensor(&[2, 3], -1.0, 1.0, &[seed, 28])],
        Box::new(move |t, ids| Ok(t.sum_all(ids[0]))),
    );
    run(
        "mean_all",
        vec![uniform_tensor(&[2, 3], -1.0, 1.0, &[seed, 29])],
        Box::new(move |t, ids| Ok(t.mean_all(ids[0]))),
    );
    run(
        "dropout",
        vec![uniform_tensor(&[3, 5], -1.0, 1.0, &[seed, 30])],
        Box::new(move |t, ids| {
            let y = t.dropout(ids[0], 0.25, true, DropoutKey::new(seed, 0, 0, 0))?;
            weighted_scalar(t, y, seed)
        }),
    );
    run(
        "cross_entropy",
        vec![uniform_tensor(&[3, 4], -2.0, 2.0, &[seed, 31])],
        Box::new(move |t, ids| t.cross_entropy_label_smoothed(ids[0], &[0, 3, 1], 0.2)),
    );
    n
}

fn sweep_block(seed: u64) {
    let spec = RedAptSpec::with_channels(4);
    let d = spec.channels;
    let inputs = vec![
        uniform_tensor(&[1, 7, d], -1.0, 1.0, &[seed, 40]),
        uniform_tensor(&[3, d, d], -0.5, 0.5, &[seed, 41]),
        uniform_tensor(&[d], -0.2, 0.2, &[seed, 42]),
        uniform_tensor(&[d], 0.5, 1.5, &[seed, 43]),
        uniform_tensor(&[d], -0.2, 0.2, &[seed, 44]),
        uniform_tensor(&[3, d, d], -0.5, 0.5, &[seed, 45]),
        uniform_tensor(&[d], -0.2, 0.2, &[seed, 46]),
        uniform_tensor(&[d], 0.5, 1.5, &[seed, 47]),
        uniform_tensor(&[d], -0.2, 0.2, &[seed, 48]),
    ];
    check_gradients(&format!("adaptor block seed {seed}"), &inputs, move |t, ids| {
        let nodes = RedAptNodes {
            w_pool: ids[1],
            b_pool: ids[2],
            ln_pool_gain: Some(ids[3]),
            ln_pool_bias: Some(ids[4]),
            w_restore: Some(ids[5]),
            b_restore: Some(ids[6]),
            ln_restore_gain: Some(ids[7]),
            ln_restore_bias: Some(ids[8]),
        };
        let y = redapt_forward(t, ids[0], &nodes, &spec, LAYERNORM_DEFAULT_EPS)?;
        weighted_scalar(t, y, seed)
    });
}

fn sweep_layer(seed: u64) {
    let (d, heads, d_ffn, b, t_len) = (4usize, 2usize, 8usize, 1usize, 4usize);
    let mut inputs = vec![uniform_tensor(&[b, t_len, d], -1.0, 1.0, &[seed, 60])];
    inputs.push(uniform_tensor(&[d], 0.5, 1.5, &[seed, 61]));
    inputs.push(uniform_tensor(&[d], -0.2, 0.2, &[seed, 62]));
    for i in 0..4 {
        inputs.push(uniform_tensor(&[d, d], -0.4, 0.4, &[seed, 63 + i]));
        inputs.push(uniform_tensor(&[d], -0.1, 0.1, &[seed, 70 + i]));
    }
    inputs.push(uniform_tensor(&[d], 0.5, 1.5, &[seed, 80]));
    inputs.push(uniform_tensor(&[d], -0.2, 0.2, &[seed, 81]));
    inputs.push(uniform_tensor(&[d, d_ffn], -0.4, 0.4, &[seed, 82]));
    inputs.push(uniform_tensor(&[d_ffn], -0.1, 0.1, &[seed, 83]));
    inputs.push(uniform_tensor(&[d_ffn, d], -0.4, 0.4, &[seed, 84]));
    inputs.push(uniform_tensor(&[d], -0.1, 0.1, &[seed, 85]));
    check_gradients(&format!("transformer layer seed {seed}"), &inputs, move |t, ids| {
        let nodes = TransformerLayerNodes {
            ln1_gain: ids[1],
            ln1_bias: ids[2],
            wq: ids[3],
            bq: ids[4],
            wk: ids[5],
            bk: ids[6],
            wv: ids[7],
            bv: ids[8],
            wo: ids[9],
            bo: ids[10],
            ln2_gain: ids[11],
            ln2_bias: ids[12],
            w1: ids[13],
            b1: ids[14],
            w2: ids[15],
            b2: ids[16],
        };
        let y = transformer_layer_forward(
            t,
            ids[0],
            &nodes,
            (d, heads, d_ffn),
            &TrainMode::inference(),
            0,
            LAYERNORM_DEFAULT_EPS,
        )?;
        weighted_scalar(t, y, seed)
    });
}
