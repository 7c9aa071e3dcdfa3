//! Gradient-check cases shared by the gradient tests and the acceptance harness.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refdense::features::{Sequence, TextEmbeddingTable};
use refdense::gradcheck::{check_gradients, GradCheckReport, DEFAULT_STEP};
use refdense::labels::DenseLabelGrid;
use refdense::losses::LossWeights;
use refdense::model::{Architecture, InputDims, Model, ModelConfig, Session};
use refdense::tape::{attention, ContrastDenominator, Tape, Var};
use refdense::trainer::item_loss;
use refdense::vocab::{ActionSpec, ActionVocabulary};
use refdense::{Result, Tensor};

pub const OP_TOL: f64 = 1e-5;
pub const MODEL_TOL: f64 = 1e-4;

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Reduces an arbitrary output to a scalar through fixed random weights, so every
/// output element contributes with a distinct coefficient.
pub fn project(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = t.constant(random(t.shape(y), &mut rng));
    let m = t.mul(y, w)?;
    Ok(t.sum(m))
}

pub fn assert_passes(what: &str, r: GradCheckReport) {
    assert!(
        r.passed,
        "{what}: max relative error {:.3e} at {:?} (analytic {}, numeric {})",
        r.max_rel_error, r.worst, r.analytic_at_worst, r.numeric_at_worst
    );
}

pub type OpCase = (
    &'static str,
    Vec<Vec<usize>>,
    fn(&mut Tape, &[Var], u64) -> Result<Var>,
);

pub fn op_cases() -> Vec<OpCase> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v, s| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, s)
        }),
        ("matmul_nt", vec![vec![3, 4], vec![5, 4]], |t, v, s| {
            let y = t.matmul_nt(v[0], v[1])?;
            project(t, y, s)
        }),
        ("add", vec![vec![3, 2], vec![3, 2]], |t, v, s| {
            let y = t.add(v[0], v[1])?;
            project(t, y, s)
        }),
        ("add_row", vec![vec![4, 3], vec![3]], |t, v, s| {
            let y = t.add_row(v[0], v[1])?;
            project(t, y, s)
        }),
        ("mul", vec![vec![3, 3], vec![3, 3]], |t, v, s| {
            let y = t.mul(v[0], v[1])?;
            project(t, y, s)
        }),
        ("scale", vec![vec![2, 3]], |t, v, s| {
            let y = t.scale(v[0], -1.7);
            project(t, y, s)
        }),
        ("sigmoid", vec![vec![3, 4]], |t, v, s| {
            let y = t.sigmoid(v[0]);
            project(t, y, s)
        }),
        ("gelu", vec![vec![3, 4]], |t, v, s| {
            let y = t.gelu(v[0]);
            project(t, y, s)
        }),
        ("softmax", vec![vec![3, 5]], |t, v, s| {
            let y = t.softmax(v[0]);
            project(t, y, s)
        }),
        (
            "layer_norm",
            vec![vec![4, 5], vec![5], vec![5]],
            |t, v, s| {
                let y = t.layer_norm(v[0], v[1], v[2])?;
                project(t, y, s)
            },
        ),
        ("concat_cols", vec![vec![3, 2], vec![3, 3]], |t, v, s| {
            let y = t.concat_cols(&[v[0], v[1], v[0]])?;
            project(t, y, s)
        }),
        ("slice_cols", vec![vec![3, 5]], |t, v, s| {
            let y = t.slice_cols(v[0], 1, 3)?;
            project(t, y, s)
        }),
        ("conv1d", vec![vec![7, 3], vec![3, 3, 2]], |t, v, s| {
            let y = t.conv1d(v[0], v[1], 2)?;
            project(t, y, s)
        }),
        (
            "conv1d_stride1",
            vec![vec![5, 2], vec![3, 2, 4]],
            |t, v, s| {
                let y = t.conv1d(v[0], v[1], 1)?;
                project(t, y, s)
            },
        ),
        ("upsample", vec![vec![3, 4]], |t, v, s| {
            let y = t.upsample(v[0], 8)?;
            project(t, y, s)
        }),
        ("take_rows", vec![vec![4, 3]], |t, v, s| {
            let y = t.take_rows(v[0], vec![3, 0, 3, 1])?;
            project(t, y, s)
        }),
        ("row_normalize", vec![vec![3, 4]], |t, v, s| {
            let y = t.row_normalize(v[0]);
            project(t, y, s)
        }),
        ("sum", vec![vec![2, 3]], |t, v, _| Ok(t.sum(v[0]))),
        ("weighted_sum", vec![vec![2, 2], vec![3, 1]], |t, v, _| {
            let a = t.sum(v[0]);
            let sq = t.mul(v[1], v[1])?;
            let b = t.sum(sq);
            Ok(t.weighted_sum(&[(a, 0.3), (b, 1.9)]))
        }),
        ("bce", vec![vec![3, 4]], |t, v, s| {
            let p = t.sigmoid(v[0]);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let y = Tensor::new(
                vec![3, 4],
                (0..12).map(|_| rng.gen_bool(0.4) as u8 as f64).collect(),
            )?;
            t.bce(p, &y)
        }),
        ("contrast", vec![vec![4, 5]], |t, v, s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let beta: Vec<Vec<usize>> = (0..4)
                .map(|_| (0..5).filter(|_| rng.gen_bool(0.35)).collect())
                .collect();
            Ok(t.contrast(v[0], &beta, ContrastDenominator::NegativesOnly)?
                .0)
        }),
        ("contrast_all_classes", vec![vec![3, 4]], |t, v, _| {
            let beta = vec![vec![0, 2], vec![1], vec![0, 1, 2, 3]];
            Ok(t.contrast(v[0], &beta, ContrastDenominator::AllClasses)?.0)
        }),
        (
            "attention",
            vec![vec![5, 4], vec![6, 4], vec![6, 4]],
            |t, v, s| {
                let y = attention(t, v[0], v[1], v[2], 2)?;
                project(t, y, s)
            },
        ),
    ]
}

pub fn tiny_vocab() -> ActionVocabulary {
    ActionVocabulary::from_parts(&[
        ActionSpec {
            name: "a0",
            entity: Some("e0"),
            motion: Some("m0"),
        },
        ActionSpec {
            name: "a1",
            entity: Some("e1"),
            motion: Some("m1"),
        },
        ActionSpec {
            name: "a2",
            entity: Some("e2"),
            motion: Some("m1"),
        },
        ActionSpec {
            name: "a3",
            entity: None,
            motion: Some("m2"),
        },
    ])
    .unwrap()
}

pub fn tiny_problem(
    seed: u64,
    arch: Architecture,
) -> (Model, Sequence, ActionVocabulary, TextEmbeddingTable) {
    let vocab = tiny_vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = InputDims {
        segment: 6,
        frame: 6,
        text_entity: 5,
        text_motion: 5,
        actions: 4,
        entities: 3,
        motions: 3,
    };
    let cfg = ModelConfig {
        architecture: arch,
        hidden: 8,
        heads: 2,
        scales: 2,
        entity_layers: 1,
        kernel_width: 3,
        ffn_mult: 2,
        t_train: 8,
        cross_attention: true,
        dims,
    };
    let mut model = Model::init(cfg, seed).unwrap();
    // Nonzero biases and gains so their gradients are exercised away from symmetry.
    for t in model.params.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    let mut labels = DenseLabelGrid::zeros(8, 4);
    for t in 0..8 {
        for c in 0..4 {
            labels.set(t, c, rng.gen_bool(0.3));
        }
    }
    let seq = Sequence::new(
        "tiny",
        random(&[8, 6], &mut rng),
        random(&[8, 6], &mut rng),
        labels,
    )
    .unwrap();
    let text = TextEmbeddingTable::new(
        &random(&[3, 5], &mut rng),
        &random(&[3, 5], &mut rng),
        &vocab,
    )
    .unwrap();
    (model, seq, vocab, text)
}

pub fn model_check(seed: u64, arch: Architecture, weights: LossWeights) -> GradCheckReport {
    let (model, seq, vocab, text) = tiny_problem(seed, arch);
    let params = model.params.tensors().to_vec();
    check_gradients(
        |tape, vars| {
            let mut s = Session::bind(&model, std::mem::take(tape), vars)?;
            let (loss, _) = item_loss(&mut s, &seq, &vocab, &text, &weights)?;
            *tape = s.into_tape();
            Ok(loss)
        },
        &params,
        DEFAULT_STEP,
        MODEL_TOL,
    )
    .unwrap()
}
