use proptest::prelude::*;

use spankl::cldata::{parse_str, to_column_text};
use spankl::numcore::{GradStore, Graph, ParamStore, Tensor};
use spankl::spankl::{
    bce_loss, decode_flat, decode_nested, kd_loss, upper_mask, DistilledLabelSet, GoldLabelSet, SpanMatrixSet,
    SpanProbs,
};
use spankl::{Sentence, Span};

fn square(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(lo..hi, n * n).prop_map(move |v| Tensor::new(vec![n, n], v).unwrap())
}

fn spans_in(n: usize, labels: &'static [&'static str]) -> impl Strategy<Value = Vec<Span>> {
    prop::collection::vec((0..n, 0..n, 0..labels.len()), 0..5).prop_map(move |v| {
        v.into_iter()
            .map(|(a, b, k)| Span::new(a.min(b), a.max(b), labels[k]))
            .collect()
    })
}

const AB: &[&str] = &["A", "B"];

fn labels() -> Vec<String> {
    AB.iter().map(|s| s.to_string()).collect()
}

proptest! {
    #[test]
    fn bce_is_nonnegative(
        (logits, gold) in (1usize..7).prop_flat_map(|n| (prop::collection::vec(square(n, -20.0, 20.0), 2), spans_in(n, AB)))
    ) {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let n = logits[0].rows();
        let m = SpanMatrixSet { n, labels: labels(), logits: logits.into_iter().map(|t| g.input(t)).collect() };
        let l = bce_loss(&mut g, &m, &GoldLabelSet::from_spans(&gold), &labels()).unwrap();
        prop_assert!(g.value(l).item() >= 0.0);
        prop_assert!(g.value(l).item().is_finite());
    }

    #[test]
    fn kd_is_nonnegative_and_zero_on_agreement(
        (logits, teacher) in (1usize..7).prop_flat_map(|n| (prop::collection::vec(square(n, -20.0, 20.0), 2), prop::collection::vec(square(n, 0.0, 1.0), 2)))
    ) {
        let store = ParamStore::new();
        let n = logits[0].rows();
        let t = DistilledLabelSet { labels: labels(), probs: teacher.clone() };
        let mut g = Graph::new(&store);
        let m = SpanMatrixSet { n, labels: labels(), logits: logits.into_iter().map(|x| g.input(x)).collect() };
        let l = kd_loss(&mut g, &m, &t, &labels()).unwrap();
        prop_assert!(g.value(l).item() >= -1e-12);

        // the student that reproduces the clamped teacher has zero divergence
        let agree: Vec<Tensor> = teacher
            .iter()
            .map(|p| {
                let v = p.data().iter().map(|q| {
                    let q = q.clamp(1e-7, 1.0 - 1e-7);
                    (q / (1.0 - q)).ln()
                });
                Tensor::new(vec![n, n], v.collect()).unwrap()
            })
            .collect();
        let mut g = Graph::new(&store);
        let m = SpanMatrixSet { n, labels: labels(), logits: agree.into_iter().map(|x| g.input(x)).collect() };
        let l = kd_loss(&mut g, &m, &t, &labels()).unwrap();
        prop_assert!(g.value(l).item().abs() < 1e-8);
    }

    #[test]
    fn loss_gradients_match_finite_differences(
        (logits, teacher, gold) in (1usize..5).prop_flat_map(|n| (square(n, -4.0, 4.0), square(n, 0.01, 0.99), spans_in(n, &["A"])))
    ) {
        let store = ParamStore::new();
        let n = logits.rows();
        let one = vec!["A".to_string()];
        let t = DistilledLabelSet { labels: one.clone(), probs: vec![teacher] };
        let gold = GoldLabelSet::from_spans(&gold);
        let eval = |x: &Tensor| -> (f64, Option<Tensor>) {
            let mut g = Graph::new(&store);
            let v = g.leaf(x.clone(), true);
            let m = SpanMatrixSet { n, labels: one.clone(), logits: vec![v] };
            let b = bce_loss(&mut g, &m, &gold, &one).unwrap();
            let k = kd_loss(&mut g, &m, &t, &one).unwrap();
            let l = g.add(b, k).unwrap();
            let leaf = g.backward(l, &mut GradStore::new()).unwrap();
            (g.value(l).item(), leaf.get(v).cloned())
        };
        let (_, grad) = eval(&logits);
        let grad = grad.unwrap();
        let mask = upper_mask(n);
        let h = 1e-5;
        for k in 0..n * n {
            let mut up = logits.clone();
            up.data_mut()[k] += h;
            let mut down = logits.clone();
            down.data_mut()[k] -= h;
            let numeric = (eval(&up).0 - eval(&down).0) / (2.0 * h);
            prop_assert!((grad.data()[k] - numeric).abs() < 1e-6, "cell {k}: {} vs {numeric}", grad.data()[k]);
            if mask.data()[k] == 0.0 {
                prop_assert_eq!(grad.data()[k], 0.0);
            }
        }
    }

    #[test]
    fn flat_decoding_is_non_overlapping_and_maximal(
        probs in (1usize..7).prop_flat_map(|n| prop::collection::vec(square(n, 0.0, 1.0), 1..4))
    ) {
        let n = probs[0].rows();
        let p = SpanProbs { n, labels: (0..probs.len()).map(|k| format!("T{k}")).collect(), probs };
        let flat = decode_flat(&p, 0.5);
        for (i, a) in flat.iter().enumerate() {
            prop_assert!(a.score > 0.5 && a.start <= a.end && a.end < n);
            for b in &flat[i + 1..] {
                prop_assert!(a.end < b.start || b.end < a.start);
            }
        }
        // every rejected candidate overlaps a kept span that scores at least as high
        for c in decode_nested(&p, 0.5) {
            if !flat.contains(&c) {
                prop_assert!(flat.iter().any(|k| !(c.end < k.start || k.end < c.start) && k.score >= c.score));
            }
        }
    }

    #[test]
    fn column_text_round_trips(
        sents in prop::collection::vec((1usize..7).prop_flat_map(|n| (Just(n), spans_in(n, &["PER", "ORG", "LOC"]))), 1..5)
    ) {
        let sentences: Vec<Sentence> = sents
            .into_iter()
            .map(|(n, spans)| {
                let mut spans: Vec<Span> = spans;
                spans.sort();
                spans.dedup();
                Sentence::new((0..n).map(|i| format!("w{i}")).collect(), spans)
            })
            .collect();
        let text = to_column_text(&sentences);
        let back = parse_str(&text, "roundtrip").unwrap();
        prop_assert_eq!(back.repaired, 0);
        prop_assert_eq!(back.corpus.sentences, sentences);
    }
}
