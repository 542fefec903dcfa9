//! Layerwise knowledge-distillation losses and the combined objective
//! `gamma * L_logit + beta * (L_att + L_hidden)`.
//!
//! Hidden-state and attention terms are mean-squared errors averaged over
//! the batch and summed over paired layers; the logit term is soft
//! cross-entropy at temperature 1. Attention targets default to the
//! post-softmax probabilities, switchable to the raw scores.

use crate::error::{Error, Result};
use crate::model::ModelOutputs;
use crate::tensor::{Graph, Value};
use serde::{Deserialize, Serialize};

/// Stage weights; each is 0 or 1 and at least one must be set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KDWeights {
    pub gamma: f32,
    pub beta: f32,
}

impl KDWeights {
    pub fn new(gamma: f32, beta: f32) -> Result<Self> {
        if !(gamma == 0.0 || gamma == 1.0) || !(beta == 0.0 || beta == 1.0) {
            return Err(Error::config(format!(
                "KD weights must be 0 or 1, got gamma={gamma} beta={beta}"
            )));
        }
        if gamma + beta < 1.0 {
            return Err(Error::config("KD weights cannot both be zero"));
        }
        Ok(KDWeights { gamma, beta })
    }
}

/// Which attention tensor the attention loss matches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionTarget {
    /// Post-softmax probabilities (bounded, scale-free).
    #[default]
    Probs,
    /// Pre-softmax scores.
    Scores,
}

/// Student-layer to teacher-layer index pairs (0-based).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KDPairing {
    pub pairs: Vec<(usize, usize)>,
}

impl KDPairing {
    /// Student layer `i` is distilled against the teacher layer it was
    /// initialized from. `selection_indices` are the 1-based teacher indices
    /// produced by layer selection.
    pub fn from_selection(selection_indices: &[usize]) -> Self {
        KDPairing {
            pairs: selection_indices
                .iter()
                .enumerate()
                .map(|(s, &t)| (s, t - 1))
                .collect(),
        }
    }

    /// Same-depth pairing: layer i vs layer i.
    pub fn identity(layers: usize) -> Self {
        KDPairing {
            pairs: (0..layers).map(|i| (i, i)).collect(),
        }
    }

    pub fn validate(&self, student_layers: usize, teacher_layers: usize) -> Result<()> {
        if self.pairs.len() != student_layers {
            return Err(Error::config(format!(
                "pairing lists {} layers, student has {student_layers}",
                self.pairs.len()
            )));
        }
        let mut seen = vec![false; student_layers];
        for &(s, t) in &self.pairs {
            if s >= student_layers || seen[s] {
                return Err(Error::config(format!(
                    "pairing must cover every student layer exactly once, got {:?}",
                    self.pairs
                )));
            }
            seen[s] = true;
            if t >= teacher_layers {
                return Err(Error::config(format!(
                    "teacher layer {t} out of range ({teacher_layers} layers)"
                )));
            }
        }
        Ok(())
    }
}

/// Mean squared error between hidden-state matrices.
pub fn loss_hidden(g: &mut Graph, h_student: Value, h_teacher: Value) -> Result<Value> {
    g.mse(h_student, h_teacher)
}

/// Mean over heads of the per-head attention-map MSE.
pub fn loss_att(g: &mut Graph, heads_student: &[Value], heads_teacher: &[Value]) -> Result<Value> {
    if heads_student.len() != heads_teacher.len() || heads_student.is_empty() {
        return Err(Error::dim(format!(
            "attention head count mismatch: {} vs {}",
            heads_student.len(),
            heads_teacher.len()
        )));
    }
    let mut acc: Option<Value> = None;
    for (&s, &t) in heads_student.iter().zip(heads_teacher) {
        let m = g.mse(s, t)?;
        acc = Some(match acc {
            None => m,
            Some(a) => g.add(a, m)?,
        });
    }
    Ok(g.scale(acc.unwrap(), 1.0 / heads_student.len() as f32))
}

/// Attention loss over stacked `[batch, heads, seq, seq]` maps. The MSE over
/// the whole stack equals the mean over heads of per-head MSEs.
pub fn loss_att_stacked(g: &mut Graph, a_student: Value, a_teacher: Value) -> Result<Value> {
    if g.shape(a_student).len() != 4 {
        return Err(Error::dim(format!(
            "stacked attention must be rank 4, got {:?}",
            g.shape(a_student)
        )));
    }
    g.mse(a_student, a_teacher)
}

/// Soft cross-entropy between student and teacher prediction logits.
pub fn loss_logit(g: &mut Graph, p_student: Value, p_teacher: Value) -> Result<Value> {
    g.soft_cross_entropy(p_student, p_teacher)
}

/// The objective's three parts plus the combined total, all graph nodes.
pub struct KdTerms {
    pub total: Value,
    pub logit: Value,
    pub hidden: Value,
    pub att: Value,
}

/// Combined objective over one batch of paired outputs.
///
/// All three parts are always evaluated (the logs report them); only the
/// parts with nonzero weight are connected to the returned total, so a
/// disabled term contributes neither value nor gradient.
pub fn kd_objective(
    g: &mut Graph,
    student: &ModelOutputs,
    teacher: &ModelOutputs,
    pairing: &KDPairing,
    weights: KDWeights,
    target: AttentionTarget,
) -> Result<KdTerms> {
    KDWeights::new(weights.gamma, weights.beta)?;
    pairing.validate(student.hiddens.len(), teacher.hiddens.len())?;

    let logit = loss_logit(g, student.logits, teacher.logits)?;

    let mut hidden_acc: Option<Value> = None;
    let mut att_acc: Option<Value> = None;
    for &(s, t) in &pairing.pairs {
        let h = loss_hidden(g, student.hiddens[s], teacher.hiddens[t])?;
        hidden_acc = Some(match hidden_acc {
            None => h,
            Some(a) => g.add(a, h)?,
        });
        let (a_s, a_t) = match target {
            AttentionTarget::Probs => (student.attn_probs[s], teacher.attn_probs[t]),
            AttentionTarget::Scores => (student.attn_scores[s], teacher.attn_scores[t]),
        };
        let a = loss_att_stacked(g, a_s, a_t)?;
        att_acc = Some(match att_acc {
            None => a,
            Some(acc) => g.add(acc, a)?,
        });
    }
    let hidden = hidden_acc.expect("pairing covers at least one layer");
    let att = att_acc.expect("pairing covers at least one layer");

    let feature = g.add(att, hidden)?;
    let total = if weights.gamma == 1.0 && weights.beta == 1.0 {
        g.add(logit, feature)?
    } else if weights.gamma == 1.0 {
        logit
    } else {
        feature
    };
    Ok(KdTerms {
        total,
        logit,
        hidden,
        att,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff, rel_err};
    use crate::model::{Activation, EncoderModel, TransformerConfig};
    use crate::rng::stream;
    use rand_distr::{Distribution, StandardNormal};

    fn randv(n: usize, label: &str) -> Vec<f32> {
        let mut rng = stream(5, label);
        (0..n)
            .map(|_| <StandardNormal as Distribution<f32>>::sample(&StandardNormal, &mut rng))
            .collect()
    }

    #[test]
    fn hidden_loss_zero_for_identical() {
        let mut g = Graph::new();
        let h = g.constant(vec![3, 4], randv(12, "h")).unwrap();
        let h2 = g.constant(vec![3, 4], g.data(h).to_vec()).unwrap();
        let l = loss_hidden(&mut g, h, h2).unwrap();
        assert_eq!(g.scalar_value(l), 0.0);
    }

    #[test]
    fn hidden_loss_hand_case() {
        let mut g = Graph::new();
        let hs = g.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let ht = g.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 0.0]).unwrap();
        let l = loss_hidden(&mut g, hs, ht).unwrap();
        assert_eq!(g.scalar_value(l), 4.0);
    }

    #[test]
    fn hidden_loss_gradient_is_scaled_difference() {
        let hs_data = randv(8, "hs");
        let ht_data = randv(8, "ht");
        let mut g = Graph::new();
        let hs_t = crate::tensor::Tensor::from_vec(vec![2, 4], hs_data.clone())
            .unwrap()
            .with_grad();
        let hs = g.leaf(&hs_t);
        let ht = g.constant(vec![2, 4], ht_data.clone()).unwrap();
        let l = loss_hidden(&mut g, hs, ht).unwrap();
        g.backward(l).unwrap();
        let analytic = g.grad(hs).unwrap().to_vec();
        let expect: Vec<f32> = hs_data
            .iter()
            .zip(&ht_data)
            .map(|(s, t)| 2.0 * (s - t) / 8.0)
            .collect();
        assert!(rel_err(&analytic, &expect) < 1e-6);
        let fd = finite_diff(
            |xs| {
                let mut g = Graph::new();
                let hs = g.constant(vec![2, 4], xs.to_vec()).unwrap();
                let ht = g.constant(vec![2, 4], ht_data.clone()).unwrap();
                let l = loss_hidden(&mut g, hs, ht).unwrap();
                g.scalar_value(l)
            },
            &hs_data,
            1e-3,
        );
        assert!(rel_err(&analytic, &fd) < 1e-3);
    }

    #[test]
    fn att_loss_mean_over_heads() {
        // two heads with per-head MSEs 1.0 and 3.0 -> 2.0
        let mut g = Graph::new();
        let s1 = g.constant(vec![2, 2], vec![1.0; 4]).unwrap();
        let t1 = g.constant(vec![2, 2], vec![0.0; 4]).unwrap(); // mse 1
        let s2 = g.constant(vec![2, 2], vec![3.0; 4]).unwrap();
        let t2 = g.constant(vec![2, 2], vec![3.0 - 3.0f32.sqrt(); 4]).unwrap(); // mse 3
        let l = loss_att(&mut g, &[s1, s2], &[t1, t2]).unwrap();
        assert!((g.scalar_value(l) - 2.0).abs() < 1e-6);
    }

    #[test]
    fn att_loss_head_mismatch_is_dimension_error() {
        let mut g = Graph::new();
        let a = g.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        assert!(matches!(
            loss_att(&mut g, &[a, a], &[a]),
            Err(Error::Dim(_))
        ));
    }

    #[test]
    fn att_loss_matches_double_loop_oracle() {
        let (heads, l) = (4usize, 8usize);
        let s_data = randv(heads * l * l, "att-s");
        let t_data = randv(heads * l * l, "att-t");

        let mut g = Graph::new();
        let per_head_s: Vec<Value> = (0..heads)
            .map(|h| {
                g.constant(vec![l, l], s_data[h * l * l..(h + 1) * l * l].to_vec())
                    .unwrap()
            })
            .collect();
        let per_head_t: Vec<Value> = (0..heads)
            .map(|h| {
                g.constant(vec![l, l], t_data[h * l * l..(h + 1) * l * l].to_vec())
                    .unwrap()
            })
            .collect();
        let got = loss_att(&mut g, &per_head_s, &per_head_t).unwrap();

        // independent double-loop oracle
        let mut total = 0.0f64;
        for h in 0..heads {
            let mut mse = 0.0f64;
            for i in 0..l * l {
                let d = (s_data[h * l * l + i] - t_data[h * l * l + i]) as f64;
                mse += d * d;
            }
            total += mse / (l * l) as f64;
        }
        let oracle = (total / heads as f64) as f32;
        assert!((g.scalar_value(got) - oracle).abs() < 1e-6);

        // stacked form agrees
        let s_stacked = g.constant(vec![1, heads, l, l], s_data).unwrap();
        let t_stacked = g.constant(vec![1, heads, l, l], t_data).unwrap();
        let stacked = loss_att_stacked(&mut g, s_stacked, t_stacked).unwrap();
        assert!((g.scalar_value(stacked) - oracle).abs() < 1e-6);
    }

    #[test]
    fn logit_loss_uniform_is_log3() {
        let mut g = Graph::new();
        let p = g.constant(vec![1, 3], vec![0.7, 0.7, 0.7]).unwrap();
        let l = loss_logit(&mut g, p, p).unwrap();
        assert!((g.scalar_value(l) - 3.0f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn logit_loss_one_hot_limit_reduces_to_hard_ce() {
        // teacher logit gap 20 makes softmax(t) one-hot to f32 precision
        let mut g = Graph::new();
        let s = g.constant(vec![1, 3], vec![0.3, -0.2, 0.9]).unwrap();
        let t = g.constant(vec![1, 3], vec![20.0, 0.0, 0.0]).unwrap();
        let soft = loss_logit(&mut g, s, t).unwrap();
        let hard = g.hard_cross_entropy(s, &[0]).unwrap();
        assert!((g.scalar_value(soft) - g.scalar_value(hard)).abs() < 1e-5);
    }

    #[test]
    fn logit_loss_matches_explicit_softmax_oracle() {
        let s_data = randv(4, "lg-s");
        let t_data = randv(4, "lg-t");
        let mut g = Graph::new();
        let s = g.constant(vec![1, 4], s_data.clone()).unwrap();
        let t = g.constant(vec![1, 4], t_data.clone()).unwrap();
        let got = loss_logit(&mut g, s, t).unwrap();

        // oracle: explicit softmaxes in f64
        let soft = |v: &[f32]| -> Vec<f64> {
            let m = v.iter().cloned().fold(f32::MIN, f32::max) as f64;
            let e: Vec<f64> = v.iter().map(|&x| ((x as f64) - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|x| x / z).collect()
        };
        let p = soft(&t_data);
        let q = soft(&s_data);
        let oracle: f64 = -p.iter().zip(&q).map(|(pi, qi)| pi * qi.ln()).sum::<f64>();
        assert!((g.scalar_value(got) as f64 - oracle).abs() < 1e-6);
    }

    // ---- combined objective ------------------------------------------------

    fn tiny_model(seed: u64) -> EncoderModel {
        let cfg = TransformerConfig {
            num_layers: 2,
            hidden: 8,
            heads: 2,
            ffn_dim: 16,
            vocab_size: 16,
            max_seq_len: 6,
            num_classes: 3,
            activation: Activation::Gelu,
        };
        let mut rng = stream(seed, "distill-model");
        EncoderModel::init(cfg, &mut rng).unwrap()
    }

    fn tokens(n: usize, seed: u64) -> Vec<u32> {
        use rand::Rng as _;
        let mut rng = stream(seed, "distill-tokens");
        (0..n).map(|_| rng.gen_range(0..16)).collect()
    }

    #[test]
    fn self_distillation_feature_terms_vanish() {
        let m = tiny_model(3);
        let toks = tokens(8, 1);
        let mut g = Graph::new();
        let a = m.forward(&mut g, &toks, 2).unwrap();
        let b = m.forward(&mut g, &toks, 2).unwrap();
        let terms = kd_objective(
            &mut g,
            &a,
            &b,
            &KDPairing::identity(2),
            KDWeights::new(1.0, 1.0).unwrap(),
            AttentionTarget::Probs,
        )
        .unwrap();
        assert_eq!(g.scalar_value(terms.hidden), 0.0);
        assert_eq!(g.scalar_value(terms.att), 0.0);
        // logit term equals the teacher distribution's entropy
        let logits = g.data(a.logits).to_vec();
        let mut entropy = 0.0f64;
        for row in logits.chunks(3) {
            let m = row.iter().cloned().fold(f32::MIN, f32::max) as f64;
            let e: Vec<f64> = row.iter().map(|&x| ((x as f64) - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for x in &e {
                let p = x / z;
                entropy -= p * p.ln();
            }
        }
        entropy /= 2.0; // batch mean
        assert!((g.scalar_value(terms.logit) as f64 - entropy).abs() < 1e-6);
    }

    #[test]
    fn beta_only_objective_ignores_classifier_head() {
        let teacher = tiny_model(5);
        let student = tiny_model(6);
        let toks = tokens(8, 2);

        let objective = |s: &EncoderModel| -> f32 {
            let mut g = Graph::new();
            let t_out = teacher.forward(&mut g, &toks, 2).unwrap();
            let s_out = s.forward(&mut g, &toks, 2).unwrap();
            let terms = kd_objective(
                &mut g,
                &s_out,
                &t_out,
                &KDPairing::identity(2),
                KDWeights::new(0.0, 1.0).unwrap(),
                AttentionTarget::Probs,
            )
            .unwrap();
            g.scalar_value(terms.total)
        };
        let before = objective(&student);
        let perturbed = {
            let s2 = student.deep_clone();
            for v in s2.cls_w.borrow_mut().data_mut() {
                *v += 3.0;
            }
            objective(&s2)
        };
        assert_eq!(before, perturbed);
    }

    #[test]
    fn objective_matches_term_by_term_oracle() {
        let teacher = tiny_model(7);
        let student = tiny_model(8);
        let toks = tokens(12, 3);
        let mut g = Graph::new();
        let t_out = teacher.forward(&mut g, &toks, 3).unwrap();
        let s_out = student.forward(&mut g, &toks, 3).unwrap();
        let terms = kd_objective(
            &mut g,
            &s_out,
            &t_out,
            &KDPairing::identity(2),
            KDWeights::new(1.0, 1.0).unwrap(),
            AttentionTarget::Probs,
        )
        .unwrap();

        // term-by-term oracle from the raw buffers
        let mse = |a: &[f32], b: &[f32]| -> f64 {
            a.iter()
                .zip(b)
                .map(|(x, y)| ((x - y) as f64).powi(2))
                .sum::<f64>()
                / a.len() as f64
        };
        let mut expect = 0.0f64;
        for l in 0..2 {
            expect += mse(g.data(s_out.hiddens[l]), g.data(t_out.hiddens[l]));
            expect += mse(g.data(s_out.attn_probs[l]), g.data(t_out.attn_probs[l]));
        }
        // soft CE via explicit softmaxes
        let sl = g.data(s_out.logits);
        let tl = g.data(t_out.logits);
        let mut ce = 0.0f64;
        for r in 0..3 {
            let srow = &sl[r * 3..(r + 1) * 3];
            let trow = &tl[r * 3..(r + 1) * 3];
            let soft = |v: &[f32]| -> Vec<f64> {
                let m = v.iter().cloned().fold(f32::MIN, f32::max) as f64;
                let e: Vec<f64> = v.iter().map(|&x| ((x as f64) - m).exp()).collect();
                let z: f64 = e.iter().sum();
                e.iter().map(|x| x / z).collect()
            };
            let p = soft(trow);
            let q = soft(srow);
            ce -= p.iter().zip(&q).map(|(pi, qi)| pi * qi.ln()).sum::<f64>();
        }
        expect += ce / 3.0;
        assert!(
            (g.scalar_value(terms.total) as f64 - expect).abs() < 1e-6,
            "{} vs {expect}",
            g.scalar_value(terms.total)
        );
    }

    #[test]
    fn objective_decomposes_exactly() {
        let teacher = tiny_model(9);
        let student = tiny_model(10);
        let toks = tokens(8, 4);
        let eval = |gamma: f32, beta: f32| -> f32 {
            let mut g = Graph::new();
            let t_out = teacher.forward(&mut g, &toks, 2).unwrap();
            let s_out = student.forward(&mut g, &toks, 2).unwrap();
            let terms = kd_objective(
                &mut g,
                &s_out,
                &t_out,
                &KDPairing::identity(2),
                KDWeights { gamma, beta },
                AttentionTarget::Probs,
            )
            .unwrap();
            g.scalar_value(terms.total)
        };
        let logit_part = eval(1.0, 0.0);
        let feature_part = eval(0.0, 1.0);
        assert_eq!(eval(1.0, 1.0), logit_part + feature_part);
    }

    #[test]
    fn objective_invariant_to_pair_order() {
        let teacher = tiny_model(11);
        let student = tiny_model(12);
        let toks = tokens(8, 5);
        let eval = |pairs: Vec<(usize, usize)>| -> f32 {
            let mut g = Graph::new();
            let t_out = teacher.forward(&mut g, &toks, 2).unwrap();
            let s_out = student.forward(&mut g, &toks, 2).unwrap();
            let terms = kd_objective(
                &mut g,
                &s_out,
                &t_out,
                &KDPairing { pairs },
                KDWeights::new(1.0, 1.0).unwrap(),
                AttentionTarget::Probs,
            )
            .unwrap();
            g.scalar_value(terms.total)
        };
        let forward_order = eval(vec![(0, 0), (1, 1)]);
        let reverse_order = eval(vec![(1, 1), (0, 0)]);
        assert!((forward_order - reverse_order).abs() < 1e-7);
    }

    #[test]
    fn all_zero_weights_rejected() {
        assert!(matches!(
            KDWeights::new(0.0, 0.0),
            Err(Error::Config(_))
        ));
        assert!(KDWeights::new(0.5, 1.0).is_err());
    }

    #[test]
    fn teacher_gradient_isolation() {
        let mut teacher = tiny_model(13);
        teacher.set_trainable(false);
        let student = tiny_model(14);
        let toks = tokens(8, 6);
        let mut g = Graph::new();
        let t_out = teacher.forward(&mut g, &toks, 2).unwrap();
        let s_out = student.forward(&mut g, &toks, 2).unwrap();
        let terms = kd_objective(
            &mut g,
            &s_out,
            &t_out,
            &KDPairing::identity(2),
            KDWeights::new(1.0, 1.0).unwrap(),
            AttentionTarget::Probs,
        )
        .unwrap();
        g.backward(terms.total).unwrap();
        for p in teacher.named_params() {
            assert!(
                p.tensor.borrow().grad().is_none(),
                "teacher parameter {} received a gradient",
                p.name
            );
        }
        // student did receive gradients
        let got_any = student
            .named_params()
            .iter()
            .any(|p| p.tensor.borrow().grad().is_some());
        assert!(got_any);
    }

    #[test]
    fn pairing_from_selection_maps_to_origin_layers() {
        let p = KDPairing::from_selection(&[3, 5, 7, 9, 11]);
        assert_eq!(p.pairs, vec![(0, 2), (1, 4), (2, 6), (3, 8), (4, 10)]);
        p.validate(5, 12).unwrap();
        assert!(p.validate(5, 10).is_err());
        assert!(KDPairing::identity(3).validate(3, 3).is_ok());
    }
}
