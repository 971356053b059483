//! Central finite-difference gradient oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Activation, Conv1dGeometry, Graph, Var};
use crate::error::Result;
use crate::layers::{Conv1d, Dense};
use crate::loss::{ClassWeights, WeightMode};
use crate::mil::bag::Bag;
use crate::mil::model::{ConvBlockConfig, ModelConfig, WeaNet};
use crate::mil::pooling::PoolingMode;
use crate::mil::train::accumulate_gradients;
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

/// Estimates `∂L/∂θ` for every scalar of every trainable parameter with
/// `(L(θ + h) - L(θ - h)) / 2h`. `loss` must be deterministic.
pub fn finite_diff_gradient<F>(mut loss: F, params: &mut ParamSet, h: f64) -> Result<Vec<Tensor>>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    let ids: Vec<ParamId> = params.ids().collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let mut grad = Tensor::zeros(params.value(id).shape());
        if params.is_trainable(id) {
            for i in 0..grad.len() {
                let orig = params.value(id).data()[i];
                params.value_mut(id).data_mut()[i] = orig + h;
                let up = loss(params)?;
                params.value_mut(id).data_mut()[i] = orig - h;
                let down = loss(params)?;
                params.value_mut(id).data_mut()[i] = orig;
                grad.data_mut()[i] = (up - down) / (2.0 * h);
            }
        }
        out.push(grad);
    }
    Ok(out)
}

/// Largest per-coordinate relative error `|a - n| / max(|a|, |n|, floor)`.
///
/// `floor` keeps coordinates whose true gradient is ~0 from dominating;
/// those are then compared in absolute terms.
pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()))
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Gradients currently held in `params`, one tensor per parameter.
pub fn collect_grads(params: &ParamSet) -> Vec<Tensor> {
    params.iter().map(|p| p.grad.clone()).collect()
}

/// Step used by [`suite`].
pub const SUITE_STEP: f64 = 1e-5;
/// Pass threshold on the maximum relative error.
pub const SUITE_TOLERANCE: f64 = 1e-4;
const SUITE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCase {
    pub name: String,
    pub scalars: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * (2.0 * rng.random::<f64>() - 1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive extents")
}

/// Checks a graph-building closure: `build` receives the graph and the
/// parameter set and returns a scalar loss node.
fn check_graph<F>(name: &str, params: &mut ParamSet, corrupt: bool, build: F) -> Result<GradCase>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<Var>,
{
    params.zero_grad();
    let mut g = Graph::new();
    let loss = build(&mut g, params)?;
    g.backward(loss, params)?;
    let mut analytic = collect_grads(params);
    let numeric = finite_diff_gradient(
        |p| {
            let mut g = Graph::new();
            let l = build(&mut g, p)?;
            Ok(g.value(l).item())
        },
        params,
        SUITE_STEP,
    )?;
    Ok(finish(name, &mut analytic, &numeric, corrupt))
}

fn finish(name: &str, analytic: &mut [Tensor], numeric: &[Tensor], corrupt: bool) -> GradCase {
    if corrupt {
        // negative control: one coordinate off by 1 %
        if let Some(t) = analytic.iter_mut().find(|t| t.max_abs() > 1e-3) {
            let i = (0..t.len()).fold(0, |b, i| if t.data()[i].abs() > t.data()[b].abs() { i } else { b });
            t.data_mut()[i] *= 1.01;
        }
    }
    let err = max_relative_error(analytic, numeric, SUITE_FLOOR);
    GradCase {
        name: name.to_string(),
        scalars: numeric.iter().map(Tensor::len).sum(),
        max_rel_error: err,
        passed: err < SUITE_TOLERANCE,
    }
}

/// Weighted sum with fixed random coefficients, so every output matters.
fn probe(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let r = random_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &shape, 1.0);
    let r = g.input(r);
    let prod = g.mul(out, r)?;
    Ok(g.sum(prod))
}

fn model_case(pooling: PoolingMode, corrupt: bool) -> Result<GradCase> {
    let config = ModelConfig {
        feature_dim: 5,
        n_classes: 3,
        conv_blocks: vec![
            ConvBlockConfig {
                channels: 4,
                kernel: 3,
                pool: 2,
            },
            ConvBlockConfig {
                channels: 6,
                kernel: 3,
                pool: 2,
            },
        ],
        segment_kernel: 3,
        embedding_dim: 7,
        hidden_dims: vec![5],
        pooling,
    };
    let mut model = WeaNet::new(config, 11)?;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    if let Some(id) = model.attention_param() {
        let w = random_tensor(&mut rng, &[3, 3], 2.0);
        model.params_mut().set_value(id, w)?;
    }
    let bags: Vec<Bag> = [30, 30, 22]
        .iter()
        .enumerate()
        .map(|(i, &frames)| Bag {
            id: format!("g{i}"),
            features: random_tensor(&mut rng, &[frames, 5], 1.5),
            true_labels: None,
            observed_labels: vec![false; 3],
            events: vec![],
        })
        .collect();
    let targets: Vec<Vec<f64>> = (0..bags.len()).map(|_| (0..3).map(|_| rng.random()).collect()).collect();
    let weights = ClassWeights::from_priors(&[0.5, 0.2, 0.05])?;
    let refs: Vec<&Bag> = bags.iter().collect();
    let trefs: Vec<&Vec<f64>> = targets.iter().collect();
    model.params_mut().zero_grad();
    accumulate_gradients(&mut model, &refs, &trefs, Some(&weights), WeightMode::WholeTerm)?;
    let mut analytic = collect_grads(model.params());
    let mut scratch = model.clone();
    let mut params = model.params().clone();
    let numeric = finite_diff_gradient(
        |p| {
            *scratch.params_mut() = p.clone();
            scratch.params_mut().zero_grad();
            accumulate_gradients(&mut scratch, &refs, &trefs, Some(&weights), WeightMode::WholeTerm)
        },
        &mut params,
        SUITE_STEP,
    )?;
    let name = match pooling {
        PoolingMode::Attention => "model_attention",
        PoolingMode::Mean => "model_mean",
        PoolingMode::Max => "model_max",
    };
    Ok(finish(name, &mut analytic, &numeric, corrupt))
}

/// Finite-difference check of every op and layer and of the composed model.
/// With `corrupt`, one analytic coordinate per case is perturbed, so every
/// case must fail.
pub fn suite(corrupt: bool) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut cases = Vec::new();

    for act in [Activation::Identity, Activation::Relu, Activation::Sigmoid] {
        let mut ps = ParamSet::new();
        let x = ps.add("x", random_tensor(&mut rng, &[3, 4], 1.0));
        let layer = Dense::new(&mut ps, "dense", 4, 5, act, &mut rng);
        let b = layer.bias;
        ps.set_value(b, random_tensor(&mut rng, &[5], 0.5))?;
        let name = format!("dense_{act:?}").to_lowercase();
        cases.push(check_graph(&name, &mut ps, corrupt, |g, p| {
            let xv = g.param(p, x);
            let out = layer.forward(g, p, xv)?;
            probe(g, out, 1)
        })?);
    }

    for (stride, padding) in [(1, 0), (2, 1)] {
        let mut ps = ParamSet::new();
        let x = ps.add("x", random_tensor(&mut rng, &[2, 3, 9], 1.0));
        let geom = Conv1dGeometry { stride, padding };
        let layer = Conv1d::new(&mut ps, "conv", 3, 4, 3, geom, Activation::Relu, &mut rng);
        ps.set_value(layer.bias, random_tensor(&mut rng, &[4], 0.5))?;
        cases.push(check_graph(&format!("conv1d_s{stride}_p{padding}"), &mut ps, corrupt, |g, p| {
            let xv = g.param(p, x);
            let out = layer.forward(g, p, xv)?;
            probe(g, out, 2)
        })?);
    }

    let mut ps = ParamSet::new();
    let x = ps.add("x", random_tensor(&mut rng, &[2, 3, 12], 1.0));
    cases.push(check_graph("pad_edge_max_pool1d", &mut ps, corrupt, |g, p| {
        let xv = g.param(p, x);
        let padded = g.pad_edge(xv, 2)?;
        let out = g.max_pool1d(padded, 3, 2)?;
        probe(g, out, 3)
    })?);

    let mut ps = ParamSet::new();
    let s = ps.add("s_logits", random_tensor(&mut rng, &[2, 3, 5], 2.0));
    let w = ps.add("w", random_tensor(&mut rng, &[3, 3], 2.0));
    cases.push(check_graph("attention_pool", &mut ps, corrupt, |g, p| {
        let logits = g.param(p, s);
        let sv = g.sigmoid(logits);
        let wv = g.param(p, w);
        let out = g.attention_pool(sv, wv)?;
        probe(g, out, 4)
    })?);

    let mut ps = ParamSet::new();
    let s = ps.add("s", random_tensor(&mut rng, &[2, 3, 5], 1.0));
    cases.push(check_graph("segment_mean_max", &mut ps, corrupt, |g, p| {
        let sv = g.param(p, s);
        let mean = g.segment_mean(sv)?;
        let max = g.segment_max(sv)?;
        let a = probe(g, mean, 5)?;
        let b = probe(g, max, 6)?;
        g.add(a, b)
    })?);

    let mut ps = ParamSet::new();
    let a = ps.add("a", random_tensor(&mut rng, &[2, 3], 1.0));
    let b = ps.add("b", random_tensor(&mut rng, &[2, 3], 1.0));
    cases.push(check_graph("elementwise", &mut ps, corrupt, |g, p| {
        let av = g.param(p, a);
        let bv = g.param(p, b);
        let m = g.mul(av, bv)?;
        let s = g.add(m, av)?;
        let s = g.scale(s, -1.5);
        let r = g.relu(s);
        probe(g, r, 7)
    })?);

    for mode in [WeightMode::WholeTerm, WeightMode::PositiveOnly] {
        let mut ps = ParamSet::new();
        let z = ps.add("logits", random_tensor(&mut rng, &[4, 3], 2.0));
        let target = Tensor::new(vec![4, 3], (0..12).map(|_| rng.random::<f64>()).collect())?;
        let weights = vec![1.0, 2.5, 4.0];
        let name = format!("bce_{mode:?}").to_lowercase();
        cases.push(check_graph(&name, &mut ps, corrupt, |g, p| {
            let zv = g.param(p, z);
            let pv = g.sigmoid(zv);
            g.bce(pv, &target, Some(&weights), mode)
        })?);
    }

    for pooling in [PoolingMode::Attention, PoolingMode::Mean, PoolingMode::Max] {
        cases.push(model_case(pooling, corrupt)?);
    }
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_negative_control_fails() {
        let cases = suite(false).unwrap();
        for c in &cases {
            assert!(c.passed, "{c:?}");
        }
        let bad = suite(true).unwrap();
        assert!(bad.iter().all(|c| !c.passed), "{bad:?}");
    }

    #[test]
    fn quadratic_central_difference() {
        let mut ps = ParamSet::new();
        ps.add("theta", Tensor::scalar(3.0));
        let g = finite_diff_gradient(|p| Ok(p.iter().next().unwrap().value.item().powi(2)), &mut ps, 1e-5)
            .unwrap();
        assert!((g[0].item() - 6.0).abs() < 1e-8);
        // parameters restored
        assert_eq!(ps.iter().next().unwrap().value.item(), 3.0);
    }

    #[test]
    fn relative_error_flags_corruption() {
        let a = vec![Tensor::new(vec![2], vec![1.0, -2.0]).unwrap()];
        let n = vec![Tensor::new(vec![2], vec![1.0, -2.0 * (1.0 + 1e-3)]).unwrap()];
        let e = max_relative_error(&a, &n, 1e-8);
        assert!(e > 9e-4 && e < 1.1e-3);
        assert_eq!(max_relative_error(&a, &a, 1e-8), 0.0);
    }
}
