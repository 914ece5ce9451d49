//! Losses over flat parameter vectors.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{ExampleStore, Targets};
use crate::rng::{self, Purpose};

/// Model and loss family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LossKind {
    /// `0.5 * mean((x . w - y)^2)`.
    Quadratic,
    /// Binary cross-entropy of a linear model plus `reg / 2 * |w|^2`.
    Logistic { reg: f64 },
    /// One ReLU hidden layer, softmax cross-entropy.
    Mlp { hidden: usize },
}

/// Loss (and accuracy for classifiers) over a set of examples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: Option<f64>,
}

fn classes(store: &ExampleStore) -> usize {
    match &store.targets {
        Targets::Labels { classes, .. } => *classes,
        Targets::Real(_) => 1,
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl LossKind {
    pub fn num_params(&self, store: &ExampleStore) -> usize {
        let d = store.dim();
        match self {
            LossKind::Quadratic | LossKind::Logistic { .. } => d,
            LossKind::Mlp { hidden } => hidden * d + hidden + classes(store) * hidden + classes(store),
        }
    }

    /// Zeros for the linear models; uniform `+-1/sqrt(fan_in)` for the MLP.
    pub fn init(&self, store: &ExampleStore, seed: u64) -> Vec<f64> {
        match self {
            LossKind::Quadratic | LossKind::Logistic { .. } => vec![0.0; store.dim()],
            LossKind::Mlp { hidden } => {
                let mut rng = rng::stream(seed, Purpose::ModelInit, 0, 0);
                let d = store.dim();
                let first = hidden * d + hidden;
                let a1 = 1.0 / (d as f64).sqrt();
                let a2 = 1.0 / (*hidden as f64).sqrt();
                (0..self.num_params(store))
                    .map(|i| {
                        let a = if i < first { a1 } else { a2 };
                        rng.random_range(-a..a)
                    })
                    .collect()
            }
        }
    }

    /// Mean loss over `batch` and its gradient.
    pub fn loss_grad(&self, params: &[f64], store: &ExampleStore, batch: &[usize]) -> (f64, Vec<f64>) {
        let x = store.features.select(Axis(0), batch);
        match (self, &store.targets) {
            (LossKind::Quadratic, Targets::Real(y)) => {
                let w = ArrayView1::from(params);
                let resid = x.dot(&w) - Array1::from_iter(batch.iter().map(|i| y[*i]));
                let n = batch.len() as f64;
                let loss = 0.5 * resid.dot(&resid) / n;
                (loss, (x.t().dot(&resid) / n).to_vec())
            }
            (LossKind::Logistic { reg }, Targets::Labels { labels, .. }) => {
                let w = ArrayView1::from(params);
                let z = x.dot(&w);
                let n = batch.len() as f64;
                let mut loss = 0.0;
                let mut coef = Array1::zeros(batch.len());
                for (j, i) in batch.iter().enumerate() {
                    let s = if labels[*i] == 1 { 1.0 } else { -1.0 };
                    loss += softplus(-s * z[j]);
                    coef[j] = -s * sigmoid(-s * z[j]) / n;
                }
                let mut grad = x.t().dot(&coef);
                grad.scaled_add(*reg, &w);
                (loss / n + 0.5 * reg * w.dot(&w), grad.to_vec())
            }
            (LossKind::Mlp { hidden }, Targets::Labels { labels, classes }) => {
                mlp_loss_grad(params, *hidden, *classes, x.view(), batch.iter().map(|i| labels[*i]))
            }
            _ => panic!("{self:?} does not match the store's targets"),
        }
    }

    pub fn loss(&self, params: &[f64], store: &ExampleStore, batch: &[usize]) -> f64 {
        self.evaluate_on(params, store, batch).loss
    }

    pub fn evaluate_on(&self, params: &[f64], store: &ExampleStore, batch: &[usize]) -> Evaluation {
        match (self, &store.targets) {
            (LossKind::Mlp { hidden }, Targets::Labels { labels, classes }) => {
                let x = store.features.select(Axis(0), batch);
                let logits = mlp_forward(params, *hidden, *classes, x.view()).1;
                let mut loss = 0.0;
                let mut hits = 0usize;
                for (row, i) in logits.outer_iter().zip(batch) {
                    let max = row.fold(f64::NEG_INFINITY, |a, b| a.max(*b));
                    let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
                    loss += lse - row[labels[*i] as usize];
                    let argmax = row.iter().enumerate().fold(0, |best, (c, z)| if *z > row[best] { c } else { best });
                    hits += usize::from(argmax == labels[*i] as usize);
                }
                let n = batch.len().max(1) as f64;
                Evaluation { loss: loss / n, accuracy: Some(hits as f64 / n) }
            }
            (LossKind::Logistic { .. }, Targets::Labels { labels, .. }) => {
                let w = ArrayView1::from(params);
                let hits = batch.iter().filter(|i| (store.row(**i).dot(&w) > 0.0) == (labels[**i] == 1)).count();
                Evaluation {
                    loss: self.loss_grad(params, store, batch).0,
                    accuracy: Some(hits as f64 / batch.len().max(1) as f64),
                }
            }
            _ => Evaluation { loss: self.loss_grad(params, store, batch).0, accuracy: None },
        }
    }

    /// Loss and accuracy over the whole store.
    pub fn evaluate(&self, params: &[f64], store: &ExampleStore) -> Evaluation {
        let all: Vec<usize> = (0..store.len()).collect();
        self.evaluate_on(params, store, &all)
    }
}

struct MlpView<'a> {
    w1: ArrayView2<'a, f64>,
    b1: ArrayView1<'a, f64>,
    w2: ArrayView2<'a, f64>,
    b2: ArrayView1<'a, f64>,
}

fn mlp_view(params: &[f64], hidden: usize, classes: usize, dim: usize) -> MlpView<'_> {
    let (a, rest) = params.split_at(hidden * dim);
    let (b, rest) = rest.split_at(hidden);
    let (c, d) = rest.split_at(classes * hidden);
    MlpView {
        w1: ArrayView2::from_shape((hidden, dim), a).expect("parameter layout"),
        b1: ArrayView1::from(b),
        w2: ArrayView2::from_shape((classes, hidden), c).expect("parameter layout"),
        b2: ArrayView1::from(d),
    }
}

/// Hidden activations and logits.
fn mlp_forward(params: &[f64], hidden: usize, classes: usize, x: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
    let v = mlp_view(params, hidden, classes, x.ncols());
    let mut h = x.dot(&v.w1.t()) + v.b1;
    h.mapv_inplace(|z| z.max(0.0));
    let logits = h.dot(&v.w2.t()) + v.b2;
    (h, logits)
}

fn mlp_loss_grad(
    params: &[f64],
    hidden: usize,
    classes: usize,
    x: ArrayView2<f64>,
    labels: impl Iterator<Item = u8>,
) -> (f64, Vec<f64>) {
    let n = x.nrows() as f64;
    let (h, logits) = mlp_forward(params, hidden, classes, x);
    let v = mlp_view(params, hidden, classes, x.ncols());
    // softmax minus one-hot, scaled by 1/n
    let mut delta = logits;
    let mut loss = 0.0;
    for (mut row, y) in delta.outer_iter_mut().zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |a, b| a.max(*b));
        row.mapv_inplace(|z| (z - max).exp());
        let sum = row.sum();
        loss -= (row[y as usize] / sum).ln();
        row.mapv_inplace(|p| p / sum / n);
        row[y as usize] -= 1.0 / n;
    }
    let gw2 = delta.t().dot(&h);
    let gb2 = delta.sum_axis(Axis(0));
    let mut dh = delta.dot(&v.w2);
    dh.zip_mut_with(&h, |g, a| {
        if *a <= 0.0 {
            *g = 0.0
        }
    });
    let gw1 = dh.t().dot(&x);
    let gb1 = dh.sum_axis(Axis(0));
    let mut grad = Vec::with_capacity(params.len());
    grad.extend(gw1.iter());
    grad.extend(gb1.iter());
    grad.extend(gw2.iter());
    grad.extend(gb2.iter());
    (loss / n, grad)
}

/// Full-data Hessian of the logistic loss, for Newton refinement.
pub(crate) fn logistic_hessian(params: &[f64], store: &ExampleStore, reg: f64) -> Array2<f64> {
    let w = ArrayView1::from(params);
    let z = store.features.dot(&w);
    let n = store.len() as f64;
    let weights = z.mapv(|z| {
        let p = sigmoid(z);
        p * (1.0 - p) / n
    });
    let scaled = &store.features * &weights.insert_axis(Axis(1));
    let mut hess = store.features.t().dot(&scaled);
    for i in 0..hess.nrows() {
        hess[[i, i]] += reg;
    }
    hess
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::ExampleStore;
    use approx::assert_relative_eq;
    use ndarray::array;

    fn finite_difference(kind: LossKind, params: &[f64], store: &ExampleStore, batch: &[usize]) -> Vec<f64> {
        let h = 1e-6;
        (0..params.len())
            .map(|i| {
                let mut up = params.to_vec();
                let mut down = params.to_vec();
                up[i] += h;
                down[i] -= h;
                (kind.loss_grad(&up, store, batch).0 - kind.loss_grad(&down, store, batch).0) / (2.0 * h)
            })
            .collect()
    }

    fn labelled(classes: usize) -> ExampleStore {
        let x = array![[0.2, -1.0, 0.5], [1.5, 0.3, -0.7], [-0.4, 0.8, 0.1], [0.9, 0.9, 0.9]];
        let labels = (0..4).map(|i| (i % classes) as u8).collect();
        ExampleStore::new(x, Targets::Labels { labels, classes }).unwrap()
    }

    #[test]
    fn quadratic_gradient_is_residual_projection() {
        let store = ExampleStore::new(Array2::eye(1), Targets::Real(vec![0.0])).unwrap();
        let (loss, g) = LossKind::Quadratic.loss_grad(&[1.0], &store, &[0]);
        assert_eq!(loss, 0.5);
        assert_eq!(g, vec![1.0]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let reg_store = ExampleStore::new(labelled(2).features, Targets::Real(vec![1.0, -2.0, 0.5, 0.0])).unwrap();
        let cases = [
            (LossKind::Quadratic, reg_store, vec![0.3, -0.2, 0.7]),
            (LossKind::Logistic { reg: 0.1 }, labelled(2), vec![0.3, -0.2, 0.7]),
        ];
        for (kind, store, params) in cases {
            let (_, g) = kind.loss_grad(&params, &store, &[0, 1, 2, 3, 1]);
            let fd = finite_difference(kind, &params, &store, &[0, 1, 2, 3, 1]);
            for (a, b) in g.iter().zip(&fd) {
                assert_relative_eq!(a, b, epsilon = 1e-7, max_relative = 1e-5);
            }
        }
        let store = labelled(3);
        let kind = LossKind::Mlp { hidden: 4 };
        let params = kind.init(&store, 9);
        assert_eq!(params.len(), 4 * 3 + 4 + 3 * 4 + 3);
        let (_, g) = kind.loss_grad(&params, &store, &[0, 1, 2, 3]);
        let fd = finite_difference(kind, &params, &store, &[0, 1, 2, 3]);
        for (a, b) in g.iter().zip(&fd) {
            assert_relative_eq!(a, b, epsilon = 1e-7, max_relative = 1e-4);
        }
    }

    #[test]
    fn mlp_evaluation_matches_training_loss() {
        let store = labelled(3);
        let kind = LossKind::Mlp { hidden: 5 };
        let p = kind.init(&store, 2);
        let e = kind.evaluate(&p, &store);
        assert_relative_eq!(e.loss, kind.loss_grad(&p, &store, &[0, 1, 2, 3]).0, max_relative = 1e-12);
        assert!(e.accuracy.unwrap() <= 1.0);
    }

    #[test]
    fn reference_mlp_size() {
        let store = ExampleStore::new(
            Array2::zeros((1, 784)),
            Targets::Labels { labels: vec![0], classes: 10 },
        )
        .unwrap();
        assert_eq!(LossKind::Mlp { hidden: 128 }.num_params(&store), 101_770);
    }

    #[test]
    fn logistic_hessian_matches_gradient_differences() {
        let store = labelled(2);
        let kind = LossKind::Logistic { reg: 0.05 };
        let w = [0.1, 0.4, -0.3];
        let hess = logistic_hessian(&w, &store, 0.05);
        let all = [0, 1, 2, 3];
        for j in 0..3 {
            let mut up = w;
            up[j] += 1e-6;
            let gu = kind.loss_grad(&up, &store, &all).1;
            let g = kind.loss_grad(&w, &store, &all).1;
            for i in 0..3 {
                assert_relative_eq!(hess[[i, j]], (gu[i] - g[i]) / 1e-6, epsilon = 1e-5);
            }
        }
    }
}
