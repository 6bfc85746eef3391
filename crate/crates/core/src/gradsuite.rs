//! Named gradient checks: one per differentiable primitive plus the three
//! composed task losses (shared encoder feeding each head).

use rand::Rng;

use crate::autodiff::{GradCheck, OpKind, Param, Tape, Tensor, Var};
use crate::data::DataSource;
use crate::encoder::{EncoderConfig, EncoderParams, InputBatch, Mode};
use crate::error::{Error, Result};
use crate::heads::{self, HeadKind, HeadParams, TaskSpec};
use crate::rng;

/// A check passes when its max relative error is below this.
pub const TOLERANCE: f64 = 1e-4;

/// Composite of gelu, layer norm and softmax on a 2x8 input.
pub const COMPOSITE: &str = "gelu_layer_norm_softmax";
pub const LOSS_CHECKS: [&str; 3] = ["ner_loss", "sts_loss", "nli_loss"];

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Every check name, primitives first.
pub fn all_checks() -> Vec<String> {
    OpKind::DIFFERENTIABLE
        .iter()
        .map(|k| k.name().to_string())
        .chain(std::iter::once(COMPOSITE.to_string()))
        .chain(LOSS_CHECKS.iter().map(|s| s.to_string()))
        .collect()
}

fn random(shape: &[usize], seed: u64, tag: u64) -> Tensor {
    let mut r = rng::stream(seed, "gradcheck", &[tag]);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect())
        .expect("shape matches length")
}

fn scaled(mut t: Tensor, c: f64) -> Tensor {
    t.data_mut().iter_mut().for_each(|v| *v *= c);
    t
}

fn primitive(check: &GradCheck, kind: OpKind, seed: u64) -> Result<f64> {
    let x = |shape: &[usize], tag| random(shape, seed, tag);
    // Each closure reduces to a scalar through a weighted sum so that every
    // output component contributes a distinct gradient.
    let weighted = |t: &mut Tape, y: Var, tag: u64| -> Result<Var> {
        let w = t.constant(random(t.shape(y), seed, 100 + tag));
        let p = t.mul(y, w)?;
        Ok(t.sum(p))
    };
    match kind {
        OpKind::MatMul => check.max_rel_error(
            |t, v| {
                let y = t.matmul(v[0], v[1])?;
                weighted(t, y, 0)
            },
            &[x(&[2, 3, 4], 1), x(&[4, 5], 2)],
        ),
        OpKind::Add => check.max_rel_error(
            |t, v| {
                let y = t.add(v[0], v[1])?;
                weighted(t, y, 1)
            },
            &[x(&[3, 4], 1), x(&[4], 2)],
        ),
        OpKind::Mul => check.max_rel_error(
            |t, v| {
                let y = t.mul(v[0], v[1])?;
                weighted(t, y, 2)
            },
            &[x(&[3, 4], 1), x(&[4], 2)],
        ),
        OpKind::Scale => check.max_rel_error(
            |t, v| {
                let y = t.scale(v[0], -1.7);
                weighted(t, y, 3)
            },
            &[x(&[5], 1)],
        ),
        OpKind::Gelu => check.max_rel_error(
            |t, v| {
                let y = t.gelu(v[0]);
                weighted(t, y, 4)
            },
            &[scaled(x(&[2, 6], 1), 3.0)],
        ),
        OpKind::Softmax => check.max_rel_error(
            |t, v| {
                let y = t.softmax(v[0], 1)?;
                weighted(t, y, 5)
            },
            &[x(&[2, 3, 4], 1)],
        ),
        OpKind::LayerNorm => check.max_rel_error(
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-12)?;
                weighted(t, y, 6)
            },
            &[x(&[3, 5], 1), x(&[5], 2), x(&[5], 3)],
        ),
        OpKind::Gather => check.max_rel_error(
            |t, v| {
                let y = t.gather(v[0], &[3, 0, 3, 1])?;
                weighted(t, y, 7)
            },
            &[x(&[4, 3], 1)],
        ),
        OpKind::Reshape => check.max_rel_error(
            |t, v| {
                let y = t.reshape(v[0], &[3, 4])?;
                weighted(t, y, 8)
            },
            &[x(&[2, 6], 1)],
        ),
        OpKind::Permute => check.max_rel_error(
            |t, v| {
                let y = t.permute(v[0], &[2, 0, 1])?;
                weighted(t, y, 9)
            },
            &[x(&[2, 3, 4], 1)],
        ),
        OpKind::MaskedFill => check.max_rel_error(
            |t, v| {
                let mask = [true, false, false, true, false, true];
                let y = t.masked_fill(v[0], &mask, -3.0)?;
                weighted(t, y, 10)
            },
            &[x(&[2, 3], 1)],
        ),
        OpKind::Sum => check.max_rel_error(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            &[x(&[7], 1)],
        ),
        OpKind::Mean => check.max_rel_error(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.mean(sq))
            },
            &[x(&[7], 1)],
        ),
        OpKind::CrossEntropy => check.max_rel_error(
            |t, v| t.cross_entropy(v[0], &[Some(2), None, Some(0), Some(3)]),
            &[scaled(x(&[4, 4], 1), 2.0)],
        ),
        OpKind::Mse => check.max_rel_error(|t, v| t.mse(v[0], v[1]), &[x(&[6], 1), x(&[6], 2)]),
        OpKind::Leaf => Err(Error::Config("leaf nodes have no gradient rule to check".into())),
    }
}

fn composite(check: &GradCheck, seed: u64) -> Result<f64> {
    check.max_rel_error(
        |t, v| {
            let g = t.gelu(v[0]);
            let n = t.layer_norm(g, v[1], v[2], 1e-12)?;
            let s = t.softmax(n, 1)?;
            let w = t.constant(random(&[2, 8], seed, 200));
            let p = t.mul(s, w)?;
            Ok(t.sum(p))
        },
        &[scaled(random(&[2, 8], seed, 1), 2.0), random(&[8], seed, 2), random(&[8], seed, 3)],
    )
}

fn probe_encoder_config() -> EncoderConfig {
    EncoderConfig {
        num_layers: 1,
        hidden_dim: 8,
        num_heads: 2,
        ffn_dim: 16,
        vocab_size: 12,
        max_seq_len: 8,
        num_segments: 2,
        dropout_rate: 0.1,
        init_std: 0.5,
    }
}

fn task_loss(check: &GradCheck, kind: HeadKind, seed: u64) -> Result<f64> {
    let enc = EncoderParams::init(&probe_encoder_config(), seed)?;
    let labels: Vec<String> = match kind {
        HeadKind::Ner => ["O", "B-X", "I-X"].map(String::from).to_vec(),
        HeadKind::Sts => vec![],
        HeadKind::Nli => ["a", "b", "c"].map(String::from).to_vec(),
    };
    let task = TaskSpec::new(kind.name(), kind, labels, 2, DataSource::default())?;
    let head = HeadParams::init(&task, 8, 0.5, seed);
    let input = InputBatch {
        batch: 2,
        seq_len: 5,
        token_ids: vec![2, 5, 3, 7, 3, 2, 8, 11, 3, 0],
        segment_ids: vec![0, 0, 0, 1, 1, 0, 0, 0, 0, 0],
        attention_mask: vec![1, 1, 1, 1, 1, 1, 1, 1, 1, 0],
    };
    let mut params: Vec<&Param> = crate::autodiff::Parameters::params(&enc);
    params.extend(crate::autodiff::Parameters::params(&head));
    // Dropout masks depend only on (seed, step, site), so they are fixed
    // across the perturbed evaluations.
    let mode = Mode::Train { seed, step: 3 };
    check.check_params(
        |tape| {
            let hs = enc.forward(tape, &input, mode)?;
            Ok(match kind {
                HeadKind::Ner => {
                    let tags = [None, Some(1), Some(2), Some(0), None, None, Some(0), Some(1), None, None];
                    heads::ner_loss(tape, hs, &head, &tags)?.0
                }
                HeadKind::Sts => heads::sts_loss(tape, hs, &head, &[1.5, 4.2])?.0,
                HeadKind::Nli => heads::nli_loss(tape, hs, &head, &[2, 0])?.0,
            })
        },
        &params,
    )
}

/// Runs the named checks in order. `fault` corrupts the backward rule of
/// one op kind on the analytic tape, which must surface as failures.
pub fn run_checks(names: &[String], fault: Option<OpKind>, seed: u64) -> Result<Vec<CheckOutcome>> {
    if names.is_empty() {
        return Err(Error::Config("gradient check list is empty".into()));
    }
    let known = all_checks();
    if let Some(bad) = names.iter().find(|n| !known.contains(n)) {
        return Err(Error::Config(format!("unknown gradient check '{bad}'")));
    }
    let check = GradCheck {
        fault,
        ..GradCheck::default()
    };
    names
        .iter()
        .map(|name| {
            let err = match name.as_str() {
                COMPOSITE => composite(&check, seed)?,
                "ner_loss" => task_loss(&check, HeadKind::Ner, seed)?,
                "sts_loss" => task_loss(&check, HeadKind::Sts, seed)?,
                "nli_loss" => task_loss(&check, HeadKind::Nli, seed)?,
                op => primitive(&check, OpKind::from_name(op).expect("validated above"), seed)?,
            };
            Ok(CheckOutcome {
                name: name.clone(),
                max_rel_error: err,
                passed: err < TOLERANCE,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        for seed in [1, 2] {
            for out in run_checks(&all_checks(), None, seed).unwrap() {
                assert!(out.passed, "{} failed: {}", out.name, out.max_rel_error);
            }
        }
    }

    #[test]
    fn fault_is_reported_under_its_name() {
        for kind in [OpKind::Gelu, OpKind::MatMul, OpKind::LayerNorm] {
            let outs = run_checks(&[kind.name().to_string()], Some(kind), 1).unwrap();
            assert!(!outs[0].passed, "{}", kind.name());
        }
        let outs = run_checks(&all_checks(), Some(OpKind::Softmax), 1).unwrap();
        let failed: Vec<&str> = outs.iter().filter(|o| !o.passed).map(|o| o.name.as_str()).collect();
        assert!(failed.contains(&"softmax"));
        assert!(failed.contains(&"nli_loss"));
        assert!(!failed.contains(&"gelu"));
    }

    #[test]
    fn empty_and_unknown_lists_are_config_errors() {
        assert!(matches!(run_checks(&[], None, 1), Err(Error::Config(_))));
        assert!(matches!(run_checks(&["tanh".into()], None, 1), Err(Error::Config(_))));
    }
}
