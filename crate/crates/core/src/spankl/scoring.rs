use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};

/// Per-type start/end projections. The two projections are independent
/// parameter sets.
#[derive(Clone, Debug, PartialEq)]
pub struct TypeHead {
    pub label: String,
    pub start_w: ParamId,
    pub start_b: ParamId,
    pub end_w: ParamId,
    pub end_b: ParamId,
}

impl TypeHead {
    pub fn new<R: Rng>(store: &mut ParamStore, label: &str, d_in: usize, d_out: usize, rng: &mut R) -> Result<Self> {
        let g = ParamGroup::Head;
        let start_w = store.add_uniform(format!("head.{label}.start.w"), g, &[d_in, d_out], d_in, rng)?;
        let start_b = store.add_uniform(format!("head.{label}.start.b"), g, &[1, d_out], d_in, rng)?;
        let end_w = store.add_uniform(format!("head.{label}.end.w"), g, &[d_in, d_out], d_in, rng)?;
        let end_b = store.add_uniform(format!("head.{label}.end.b"), g, &[1, d_out], d_in, rng)?;
        Ok(TypeHead {
            label: label.to_string(),
            start_w,
            start_b,
            end_w,
            end_b,
        })
    }

    pub fn attach(store: &ParamStore, label: &str) -> Result<Self> {
        let get = |part: &str| {
            let name = format!("head.{label}.{part}");
            store
                .id(&name)
                .ok_or_else(|| Error::Data(format!("missing parameter `{name}`")))
        };
        Ok(TypeHead {
            label: label.to_string(),
            start_w: get("start.w")?,
            start_b: get("start.b")?,
            end_w: get("end.w")?,
            end_b: get("end.b")?,
        })
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.start_w, self.start_b, self.end_w, self.end_b]
    }
}

/// Logit matrices `M^k` (n×n) for a list of entity types, as graph variables.
/// Only cells with `i <= j` are meaningful.
#[derive(Clone, Debug)]
pub struct SpanMatrixSet {
    pub n: usize,
    pub labels: Vec<String>,
    pub logits: Vec<Var>,
}

impl SpanMatrixSet {
    pub fn get(&self, label: &str) -> Option<Var> {
        self.labels.iter().position(|l| l == label).map(|i| self.logits[i])
    }
}

/// `M^k_ij = start_k(h_i) · end_k(h_j) / sqrt(d_out)` for every head.
pub fn span_logits(g: &mut Graph, hidden: Var, heads: &[TypeHead]) -> Result<SpanMatrixSet> {
    if heads.is_empty() {
        return Err(Error::InvalidArgument("span scoring needs at least one type head".into()));
    }
    let n = g.shape(hidden)[0];
    let mut logits = Vec::with_capacity(heads.len());
    for h in heads {
        let d_out = g.store().value(h.start_w).cols();
        let (sw, sb, ew, eb) = (g.param(h.start_w), g.param(h.start_b), g.param(h.end_w), g.param(h.end_b));
        let s = g.matmul(hidden, sw)?;
        let s = g.add_row(s, sb)?;
        let e = g.matmul(hidden, ew)?;
        let e = g.add_row(e, eb)?;
        let et = g.transpose(e)?;
        let m = g.matmul(s, et)?;
        logits.push(g.scale(m, (d_out as f64).powf(-0.5)));
    }
    Ok(SpanMatrixSet {
        n,
        labels: heads.iter().map(|h| h.label.clone()).collect(),
        logits,
    })
}

/// 1 on and above the diagonal, 0 below.
pub fn upper_mask(n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i..n {
            t.set(i, j, 1.0);
        }
    }
    t
}

/// Gold spans per entity type, `(start, end)` 0-based inclusive.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GoldLabelSet {
    pub spans: BTreeMap<String, BTreeSet<(usize, usize)>>,
}

impl GoldLabelSet {
    pub fn from_spans<'a>(spans: impl IntoIterator<Item = &'a crate::Span>) -> Self {
        let mut out = GoldLabelSet::default();
        for s in spans {
            out.spans.entry(s.label.clone()).or_default().insert((s.start, s.end));
        }
        out
    }

    fn target(&self, label: &str, n: usize) -> Result<Tensor> {
        let mut t = Tensor::zeros(&[n, n]);
        if let Some(set) = self.spans.get(label) {
            for &(i, j) in set {
                if i > j || j >= n {
                    return Err(Error::InvalidArgument(format!(
                        "gold span ({i}, {j}) of `{label}` outside a {n}-token sentence"
                    )));
                }
                t.set(i, j, 1.0);
            }
        }
        Ok(t)
    }
}

/// Teacher probabilities per old entity type (n×n each, upper triangle used).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DistilledLabelSet {
    pub labels: Vec<String>,
    pub probs: Vec<Tensor>,
}

impl DistilledLabelSet {
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, label: &str) -> Option<&Tensor> {
        self.labels.iter().position(|l| l == label).map(|i| &self.probs[i])
    }
}

/// Lower/upper clamp applied to teacher probabilities.
pub const TEACHER_CLAMP: f64 = 1e-7;

/// Multi-label binary cross entropy summed over upper-triangle cells of the
/// `current` types' matrices.
pub fn bce_loss(g: &mut Graph, m: &SpanMatrixSet, gold: &GoldLabelSet, current: &[String]) -> Result<Var> {
    for label in gold.spans.keys() {
        if !current.contains(label) {
            return Err(Error::InvalidArgument(format!("gold type `{label}` is not a current type")));
        }
    }
    let mask = upper_mask(m.n);
    let mut total: Option<Var> = None;
    for label in current {
        let logits = m
            .get(label)
            .ok_or_else(|| Error::InvalidArgument(format!("no span matrix for current type `{label}`")))?;
        let target = gold.target(label, m.n)?;
        let l = g.bce_with_logits(logits, &target, &mask)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    total.ok_or_else(|| Error::InvalidArgument("BCE over zero current types".into()))
}

/// Bernoulli KL divergence from the teacher's distribution to the student's,
/// summed over upper-triangle cells of the `old` types' matrices.
pub fn kd_loss(g: &mut Graph, m: &SpanMatrixSet, distilled: &DistilledLabelSet, old: &[String]) -> Result<Var> {
    let mask = upper_mask(m.n);
    let mut entropy_term = 0.0;
    let mut total: Option<Var> = None;
    for label in old {
        let logits = m
            .get(label)
            .ok_or_else(|| Error::InvalidArgument(format!("no span matrix for old type `{label}`")))?;
        let teacher = distilled
            .get(label)
            .ok_or_else(|| Error::InvalidArgument(format!("no distilled matrix for old type `{label}`")))?;
        if teacher.shape() != [m.n, m.n] {
            return Err(Error::shape("kd_loss", teacher.shape(), &[m.n, m.n]));
        }
        let clamped = Tensor::new(
            teacher.shape().to_vec(),
            teacher
                .data()
                .iter()
                .map(|p| p.clamp(TEACHER_CLAMP, 1.0 - TEACHER_CLAMP))
                .collect(),
        )?;
        for (p, w) in clamped.data().iter().zip(mask.data()) {
            if *w != 0.0 {
                entropy_term += p * p.ln() + (1.0 - p) * (1.0 - p).ln();
            }
        }
        // softplus(x) - p·x = -p·log σ(x) - (1-p)·log(1-σ(x))
        let l = g.bce_with_logits(logits, &clamped, &mask)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    let cross = total.ok_or_else(|| Error::InvalidArgument("KD over zero old types".into()))?;
    let neg_entropy = g.input(Tensor::scalar(entropy_term));
    g.add(cross, neg_entropy)
}

/// `alpha · bce + beta · kd`.
pub fn total_loss(g: &mut Graph, bce: Var, kd: Option<Var>, alpha: f64, beta: f64) -> Result<Var> {
    if alpha < 0.0 || beta < 0.0 {
        return Err(Error::InvalidArgument(format!("loss weights must be >= 0 (alpha {alpha}, beta {beta})")));
    }
    let a = g.scale(bce, alpha);
    match kd {
        Some(kd) => {
            let b = g.scale(kd, beta);
            g.add(a, b)
        }
        None => Ok(a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::GradStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn logits_set(g: &mut Graph, label: &str, t: Tensor) -> SpanMatrixSet {
        let n = t.rows();
        let v = g.input(t);
        SpanMatrixSet {
            n,
            labels: vec![label.to_string()],
            logits: vec![v],
        }
    }

    fn per_cell_bce(x: f64, p: f64) -> f64 {
        let q = 1.0 / (1.0 + (-x).exp());
        -(p * q.ln() + (1.0 - p) * (1.0 - q).ln())
    }

    #[test]
    fn bce_single_cell_at_zero_logit() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let m = logits_set(&mut g, "PER", Tensor::matrix(1, 1, vec![0.0]).unwrap());
        let gold = GoldLabelSet::from_spans(&[crate::Span::new(0, 0, "PER")]);
        let l = bce_loss(&mut g, &m, &gold, &["PER".into()]).unwrap();
        let expected = 2f64.ln();
        assert!((g.value(l).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn bce_saturated_prediction_is_tiny() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = Tensor::from_rows(&[&[20.0, -20.0], &[0.0, 20.0]]).unwrap();
        let m = logits_set(&mut g, "PER", x);
        let gold = GoldLabelSet::from_spans(&[crate::Span::new(0, 0, "PER"), crate::Span::new(1, 1, "PER")]);
        let l = bce_loss(&mut g, &m, &gold, &["PER".into()]).unwrap();
        assert!(g.value(l).item() < 1e-6);
    }

    #[test]
    fn bce_matches_per_cell_oracle() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = Tensor::from_rows(&[&[0.3, -0.2], &[99.0, 0.1]]).unwrap();
        let m = logits_set(&mut g, "PER", x);
        let gold = GoldLabelSet::from_spans(&[crate::Span::new(0, 0, "PER")]);
        let l = bce_loss(&mut g, &m, &gold, &["PER".into()]).unwrap();
        let oracle = per_cell_bce(0.3, 1.0) + per_cell_bce(-0.2, 0.0) + per_cell_bce(0.1, 0.0);
        assert!((g.value(l).item() - oracle).abs() < 1e-12);
    }

    #[test]
    fn bce_rejects_out_of_bounds_gold_and_foreign_type() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let m = logits_set(&mut g, "PER", Tensor::zeros(&[2, 2]));
        let bad = GoldLabelSet::from_spans(&[crate::Span::new(1, 2, "PER")]);
        assert!(bce_loss(&mut g, &m, &bad, &["PER".into()]).is_err());
        let foreign = GoldLabelSet::from_spans(&[crate::Span::new(0, 0, "ORG")]);
        assert!(bce_loss(&mut g, &m, &foreign, &["PER".into()]).is_err());
    }

    fn kd_single(teacher: f64, student: f64) -> f64 {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let logit = (student / (1.0 - student)).ln();
        let m = logits_set(&mut g, "PER", Tensor::matrix(1, 1, vec![logit]).unwrap());
        let d = DistilledLabelSet {
            labels: vec!["PER".into()],
            probs: vec![Tensor::matrix(1, 1, vec![teacher]).unwrap()],
        };
        let l = kd_loss(&mut g, &m, &d, &["PER".into()]).unwrap();
        g.value(l).item()
    }

    #[test]
    fn kd_examples() {
        assert!(kd_single(0.3, 0.3).abs() < 1e-12);
        let expected = 0.8 * (0.8f64.ln() - 0.6f64.ln()) + 0.2 * (0.2f64.ln() - 0.4f64.ln());
        // same value through a different algebraic route: 0.8 ln(4/3) - 0.2 ln 2 = 0.0915162...
        assert!((expected - (0.8 * (4.0f64 / 3.0).ln() - 0.2 * 2f64.ln())).abs() < 1e-15);
        assert!((expected - 0.0915162).abs() < 1e-6);
        assert!((kd_single(0.8, 0.6) - expected).abs() < 1e-12);
        assert!((kd_single(1.0 - 1e-12, 0.5) - std::f64::consts::LN_2).abs() < 1e-5);
    }

    #[test]
    fn kd_requires_every_old_type() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let m = logits_set(&mut g, "PER", Tensor::zeros(&[1, 1]));
        assert!(kd_loss(&mut g, &m, &DistilledLabelSet::default(), &["PER".into()]).is_err());
    }

    #[test]
    fn lower_triangle_is_ignored() {
        let s = ParamStore::new();
        let eval = |lower: f64| {
            let mut g = Graph::new(&s);
            let x = Tensor::from_rows(&[&[0.5, 1.0], &[lower, -0.3]]).unwrap();
            let m = logits_set(&mut g, "PER", x);
            let gold = GoldLabelSet::from_spans(&[crate::Span::new(0, 1, "PER")]);
            let b = bce_loss(&mut g, &m, &gold, &["PER".into()]).unwrap();
            let d = DistilledLabelSet {
                labels: vec!["PER".into()],
                probs: vec![Tensor::from_rows(&[&[0.2, 0.9], &[0.5, 0.4]]).unwrap()],
            };
            let k = kd_loss(&mut g, &m, &d, &["PER".into()]).unwrap();
            (g.value(b).item(), g.value(k).item())
        };
        assert_eq!(eval(0.0), eval(-37.0));
    }

    #[test]
    fn total_loss_weights() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let b = g.input(Tensor::scalar(0.5));
        let k = g.input(Tensor::scalar(0.25));
        let t = total_loss(&mut g, b, Some(k), 1.0, 1.0).unwrap();
        assert_eq!(g.value(t).item(), 0.75);
        let t = total_loss(&mut g, b, Some(k), 1.0, 0.0).unwrap();
        assert_eq!(g.value(t).item(), 0.5);
        let z = g.input(Tensor::scalar(0.0));
        let t = total_loss(&mut g, b, Some(z), 0.0, 1.0).unwrap();
        assert_eq!(g.value(t).item(), 0.0);
        assert!(total_loss(&mut g, b, None, -1.0, 1.0).is_err());
    }

    fn head_with_outputs(store: &mut ParamStore, d_in: usize, start: &[f64], end: &[f64]) -> TypeHead {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = TypeHead::new(store, "PER", d_in, start.len(), &mut rng).unwrap();
        *store.value_mut(h.start_w) = Tensor::zeros(&[d_in, start.len()]);
        *store.value_mut(h.end_w) = Tensor::zeros(&[d_in, end.len()]);
        *store.value_mut(h.start_b) = Tensor::matrix(1, start.len(), start.to_vec()).unwrap();
        *store.value_mut(h.end_b) = Tensor::matrix(1, end.len(), end.to_vec()).unwrap();
        h
    }

    #[test]
    fn scaled_dot_product_examples() {
        let mut store = ParamStore::new();
        let h = head_with_outputs(&mut store, 3, &[2.0], &[3.0]);
        let mut g = Graph::new(&store);
        let hidden = g.input(Tensor::full(&[2, 3], 0.4));
        let m = span_logits(&mut g, hidden, &[h]).unwrap();
        assert_eq!(g.value(m.logits[0]).get(0, 1), 6.0);

        let mut store = ParamStore::new();
        let h = head_with_outputs(&mut store, 3, &[1.0; 4], &[1.0; 4]);
        let mut g = Graph::new(&store);
        let hidden = g.input(Tensor::full(&[1, 3], -0.7));
        let m = span_logits(&mut g, hidden, &[h]).unwrap();
        assert_eq!(g.value(m.logits[0]).item(), 2.0);

        let mut store = ParamStore::new();
        let h = head_with_outputs(&mut store, 3, &[0.0; 5], &[1.5; 5]);
        let mut g = Graph::new(&store);
        let hidden = g.input(Tensor::full(&[3, 3], 1.0));
        let m = span_logits(&mut g, hidden, &[h]).unwrap();
        assert!(g.value(m.logits[0]).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn hidden_width_mismatch_rejected() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = TypeHead::new(&mut store, "PER", 4, 2, &mut rng).unwrap();
        let mut g = Graph::new(&store);
        let hidden = g.input(Tensor::zeros(&[2, 5]));
        assert!(matches!(span_logits(&mut g, hidden, &[h]), Err(Error::Shape { .. })));
        assert!(span_logits(&mut g, hidden, &[]).is_err());
    }

    #[test]
    fn kd_gradient_vanishes_at_teacher() {
        let mut store = ParamStore::new();
        let x = store
            .add("x", ParamGroup::Head, Tensor::from_rows(&[&[0.4, -1.2], &[0.0, 2.0]]).unwrap())
            .unwrap();
        let probs = Tensor::new(
            vec![2, 2],
            store.value(x).data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect(),
        )
        .unwrap();
        let mut g = Graph::new(&store);
        let xv = g.param(x);
        let m = SpanMatrixSet {
            n: 2,
            labels: vec!["PER".into()],
            logits: vec![xv],
        };
        let d = DistilledLabelSet {
            labels: vec!["PER".into()],
            probs: vec![probs],
        };
        let l = kd_loss(&mut g, &m, &d, &["PER".into()]).unwrap();
        let mut grads = GradStore::new();
        g.backward(l, &mut grads).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|v| v.abs() < 1e-15));
    }
}
