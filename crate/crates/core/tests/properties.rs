//! Property tests for label decomposition, metrics and loss invariants.

use proptest::prelude::*;
use refdense::labels::{decompose_labels, DenseLabelGrid};
use refdense::losses::colv;
use refdense::metrics::{average_precision, conditional_timesteps, per_frame_map, Prediction};
use refdense::tape::{ContrastDenominator, Tape};
use refdense::vocab::{ActionSpec, ActionVocabulary, Family};
use refdense::Tensor;

/// Action → (entity, motion) mappings with at least one side present per action.
fn mappings() -> impl Strategy<Value = Vec<(Option<usize>, Option<usize>)>> {
    prop::collection::vec(
        (prop::option::of(0..4usize), prop::option::of(0..4usize))
            .prop_filter("action without any sub-class", |(e, m)| {
                e.is_some() || m.is_some()
            }),
        1..8,
    )
}

fn vocab_for(map: &[(Option<usize>, Option<usize>)]) -> ActionVocabulary {
    let names: Vec<String> = (0..map.len()).map(|a| format!("act{a}")).collect();
    let ents: Vec<String> = (0..4).map(|e| format!("ent{e}")).collect();
    let mots: Vec<String> = (0..4).map(|m| format!("mot{m}")).collect();
    let specs: Vec<ActionSpec> = map
        .iter()
        .enumerate()
        .map(|(a, (e, m))| ActionSpec {
            name: &names[a],
            entity: e.map(|e| ents[e].as_str()),
            motion: m.map(|m| mots[m].as_str()),
        })
        .collect();
    ActionVocabulary::from_parts(&specs).unwrap()
}

fn grid(t: usize, c: usize, bits: &[bool]) -> DenseLabelGrid {
    let mut g = DenseLabelGrid::zeros(t, c);
    for (i, b) in bits.iter().enumerate().take(t * c) {
        g.set(i / c, i % c, *b);
    }
    g
}

fn family_name(f: Family) -> &'static str {
    match f {
        Family::Entity => "ent",
        Family::Motion => "mot",
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn decomposition_matches_the_name_level_oracle(
        map in mappings(),
        t in 1..20usize,
        bits in prop::collection::vec(any::<bool>(), 160),
    ) {
        let vocab = vocab_for(&map);
        let y = grid(t, map.len(), &bits);
        let sub = decompose_labels(&y, &vocab).unwrap();
        for family in [Family::Entity, Family::Motion] {
            let g = sub.family(family);
            for (k, concept) in vocab.concepts(family).iter().enumerate() {
                let idx: usize = concept.name[3..].parse().unwrap();
                prop_assert!(concept.name.starts_with(family_name(family)));
                for s in 0..t {
                    let expect = map.iter().enumerate().any(|(a, (e, m))| {
                        let target = match family { Family::Entity => *e, Family::Motion => *m };
                        target == Some(idx) && y.get(s, a)
                    });
                    prop_assert_eq!(g.get(s, k), expect);
                }
            }
        }
    }

    #[test]
    fn sub_label_intervals_are_unions_of_action_intervals(
        map in mappings(),
        t in 1..30usize,
        bits in prop::collection::vec(any::<bool>(), 240),
    ) {
        let vocab = vocab_for(&map);
        let y = grid(t, map.len(), &bits);
        let sub = decompose_labels(&y, &vocab).unwrap();
        for family in [Family::Entity, Family::Motion] {
            for k in 0..vocab.num_classes(family) {
                let mut covered = vec![false; t];
                for a in 0..map.len() {
                    if vocab.mapping(a, family) == Some(k) {
                        for (lo, hi) in y.intervals(a) {
                            covered[lo..hi].iter_mut().for_each(|c| *c = true);
                        }
                    }
                }
                let got: Vec<bool> = (0..t).map(|s| sub.family(family).get(s, k)).collect();
                prop_assert_eq!(got, covered);
            }
        }
    }

    #[test]
    fn average_precision_is_invariant_under_monotone_transforms(
        scores in prop::collection::vec(-5.0..5.0f64, 1..40),
        bits in prop::collection::vec(any::<bool>(), 40),
    ) {
        let labels = &bits[..scores.len()];
        let base = average_precision(&scores, labels);
        prop_assert_eq!(base.is_none(), !labels.iter().any(|b| *b));
        let affine: Vec<f64> = scores.iter().map(|s| 3.0 * s + 1.0).collect();
        let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        prop_assert_eq!(average_precision(&affine, labels), base);
        prop_assert_eq!(average_precision(&exp, labels), base);
        if let Some(ap) = base {
            prop_assert!((0.0..=1.0).contains(&ap));
        }
    }

    #[test]
    fn perfect_ranking_scores_one(bits in prop::collection::vec(any::<bool>(), 1..40)) {
        prop_assume!(bits.iter().any(|b| *b));
        let scores: Vec<f64> = bits.iter().enumerate().map(|(i, b)| if *b { 10.0 + i as f64 } else { -(i as f64) }).collect();
        prop_assert_eq!(average_precision(&scores, &bits), Some(1.0));
    }

    #[test]
    fn per_frame_map_is_invariant_under_class_permutation(
        t in 1..12usize,
        c in 1..6usize,
        scores in prop::collection::vec(0.0..1.0f64, 72),
        bits in prop::collection::vec(any::<bool>(), 72),
        rot in 0..6usize,
    ) {
        let y = grid(t, c, &bits);
        let s = Tensor::matrix(t, c, scores[..t * c].to_vec()).unwrap();
        let perm: Vec<usize> = (0..c).map(|k| (k + rot) % c).collect();
        let yp = y.permute_classes(&perm);
        let mut sp = vec![0.0; t * c];
        for r in 0..t {
            for k in 0..c {
                sp[r * c + perm[k]] = s.at(r, k);
            }
        }
        prop_assert_eq!(yp.get(0, perm[0]), y.get(0, 0));
        let (_, a) = per_frame_map(&[Prediction::new(s, y).unwrap()]).unwrap();
        let (_, b) = per_frame_map(&[Prediction::new(Tensor::matrix(t, c, sp).unwrap(), yp).unwrap()]).unwrap();
        match (a, b) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
            (a, b) => prop_assert_eq!(a, b),
        }
    }

    #[test]
    fn conditional_windows_cover_every_positive_and_stay_in_range(
        t in 1..40usize,
        tau in 0..25usize,
        bits in prop::collection::vec(any::<bool>(), 40),
    ) {
        let y = grid(t, 1, &bits);
        let w = conditional_timesteps(&y, 0, tau);
        prop_assert!(w.windows(2).all(|p| p[0] < p[1]));
        prop_assert!(w.iter().all(|&s| s < t));
        for s in 0..t {
            let near = (0..t).any(|u| y.get(u, 0) && u.abs_diff(s) <= tau);
            prop_assert_eq!(w.contains(&s), near);
        }
    }

    #[test]
    fn bce_is_invariant_under_class_permutation(
        probs in prop::collection::vec(0.01..0.99f64, 12),
        bits in prop::collection::vec(any::<bool>(), 12),
        rot in 1..4usize,
    ) {
        let (t, c) = (3, 4);
        let perm: Vec<usize> = (0..c).map(|k| (k + rot) % c).collect();
        let permute = |v: &[f64]| -> Vec<f64> {
            (0..t * c).map(|i| v[(i / c) * c + perm[i % c]]).collect()
        };
        let y: Vec<f64> = bits.iter().map(|b| *b as u8 as f64).collect();
        let eval = |p: Vec<f64>, y: Vec<f64>| {
            let mut tape = Tape::new();
            let p = tape.constant(Tensor::matrix(t, c, p).unwrap());
            let l = tape.bce(p, &Tensor::matrix(t, c, y).unwrap()).unwrap();
            tape.scalar(l)
        };
        let a = eval(probs.clone(), y.clone());
        let b = eval(permute(&probs), permute(&y));
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn colv_is_invariant_under_text_row_permutation(
        z in prop::collection::vec(-1.0..1.0f64, 12),
        text in prop::collection::vec(-1.0..1.0f64, 15),
        pos in prop::collection::vec(prop::collection::btree_set(0..5usize, 0..3), 4),
        rot in 1..5usize,
    ) {
        let (t, c, d) = (4usize, 5usize, 3usize);
        let text = unit_rows(c, d, &text);
        let inv: Vec<usize> = (0..c).map(|k| (k + c - rot % c) % c).collect();
        let pos: Vec<Vec<usize>> = pos.iter().map(|s| s.iter().copied().collect()).collect();
        // Row k of the permuted table is row (k + rot) mod c of the original, so class e
        // moves to index inv[e].
        let mut ptext = vec![0.0; c * d];
        for k in 0..c {
            let src = (k + rot) % c;
            ptext[k * d..(k + 1) * d].copy_from_slice(&text.data()[src * d..(src + 1) * d]);
        }
        let ppos: Vec<Vec<usize>> = pos.iter().map(|s| s.iter().map(|e| inv[*e]).collect()).collect();
        let eval = |txt: &Tensor, p: &[Vec<usize>]| {
            let mut tape = Tape::new();
            let zv = tape.constant(Tensor::matrix(t, d, z.clone()).unwrap());
            let (l, _) = colv(&mut tape, zv, txt, p, 0.07, true, ContrastDenominator::NegativesOnly).unwrap();
            tape.scalar(l)
        };
        let a = eval(&text, &pos);
        let b = eval(&Tensor::matrix(c, d, ptext).unwrap(), &ppos);
        prop_assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
    }

    #[test]
    fn contrast_falls_with_positive_scores_and_rises_with_negative_scores(
        s in prop::collection::vec(-3.0..3.0f64, 6),
        pos in prop::collection::btree_set(0..6usize, 1..5),
        bump in 0.01..2.0f64,
    ) {
        let pos: Vec<usize> = pos.into_iter().collect();
        let eval = |row: &[f64]| {
            let mut tape = Tape::new();
            let v = tape.constant(Tensor::matrix(1, 6, row.to_vec()).unwrap());
            let (l, _) = tape.contrast(v, std::slice::from_ref(&pos), ContrastDenominator::NegativesOnly).unwrap();
            tape.scalar(l)
        };
        let base = eval(&s);
        let p = pos[0];
        let n = (0..6).find(|k| !pos.contains(k)).unwrap();
        let mut up_pos = s.clone();
        up_pos[p] += bump;
        let mut up_neg = s.clone();
        up_neg[n] += bump;
        prop_assert!(eval(&up_pos) < base);
        prop_assert!(eval(&up_neg) > base);
    }
}

fn unit_rows(rows: usize, cols: usize, data: &[f64]) -> Tensor {
    let mut out = data[..rows * cols].to_vec();
    for r in out.chunks_mut(cols) {
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-6);
        r.iter_mut().for_each(|v| *v /= n);
    }
    Tensor::matrix(rows, cols, out).unwrap()
}
