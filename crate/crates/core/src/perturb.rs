//! Perceptually regularized adversarial perturbations.
//!
//! For an image `x` and class `i` we look for `x'` minimizing
//!
//! ```text
//! (M_i(x') - T)^2 + lambda' * sum_{l in L} ||C_l(x') - C_l(x)||^2 + lambda * ||x' - x||^2
//! ```
//!
//! where `M_i` is the class margin, `T < 0` the target margin and `C_l` the
//! output of ReLU `l`. With `lambda' = 0` (or `L` empty) the middle term is
//! absent altogether, which gives the plain pixel-regularized attack.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_full, Forward, LayerSet, Mode, Network};
use crate::tensor::{CompGraph, NodeId, Tensor};

/// Which margin drives the attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum MarginSpec {
    /// `C_i - max_{j != i} C_j`.
    SingleLabel { class: usize },
    /// `C_i`; with `suppress_all_regions` the max of class `i`'s response
    /// over every spatial region.
    MultiLabel {
        class: usize,
        suppress_all_regions: bool,
    },
}

impl MarginSpec {
    pub fn class(&self) -> usize {
        match *self {
            MarginSpec::SingleLabel { class } | MarginSpec::MultiLabel { class, .. } => class,
        }
    }

    /// The natural margin for a network's mode.
    pub fn for_network(net: &Network, class: usize) -> Self {
        match net.mode() {
            Mode::SingleLabel => MarginSpec::SingleLabel { class },
            Mode::MultiLabel => MarginSpec::MultiLabel {
                class,
                suppress_all_regions: true,
            },
        }
    }
}

/// Margin of a class-score vector or response map.
///
/// Single-label input is a `[K]` logit vector with `K >= 2`; the competing
/// maximum takes the lowest index on ties, so equal scores give margin 0.
/// Multi-label input is `[K]` per-class scores, or with suppression a
/// `[K,H,W]` response map (or a bare `[H,W]` map for the class).
pub fn margin(response: &Tensor, spec: &MarginSpec) -> Result<f64> {
    match *spec {
        MarginSpec::SingleLabel { class } => {
            response.expect_rank(1, "single-label logits")?;
            let k = response.len();
            if k < 2 {
                return Err(Error::invalid(format!("single-label margin needs K >= 2, got {k}")));
            }
            check_class(class, k)?;
            let d = response.data();
            let rival = competitors(k, class)
                .map(|j| d[j])
                .fold(f64::NEG_INFINITY, f64::max);
            Ok(d[class] - rival)
        }
        MarginSpec::MultiLabel {
            class,
            suppress_all_regions,
        } => match (response.ndim(), suppress_all_regions) {
            (1, _) => {
                check_class(class, response.len())?;
                Ok(response.data()[class])
            }
            (2, true) => Ok(response.max()),
            (3, true) => {
                let k = response.shape()[0];
                check_class(class, k)?;
                let plane = response.shape()[1] * response.shape()[2];
                Ok(response.data()[class * plane..(class + 1) * plane]
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max))
            }
            _ => Err(Error::shape(format!(
                "multi-label margin cannot use response of shape {:?} (suppression {})",
                response.shape(),
                suppress_all_regions
            ))),
        },
    }
}

fn check_class(class: usize, k: usize) -> Result<()> {
    if class >= k {
        return Err(Error::invalid(format!("class {class} out of range for {k} classes")));
    }
    Ok(())
}

fn competitors(k: usize, class: usize) -> impl Iterator<Item = usize> {
    (0..k).filter(move |&j| j != class)
}

/// Records the margin of a recorded forward pass as a scalar graph node.
pub fn margin_node(fwd: &mut Forward, spec: &MarginSpec) -> Result<NodeId> {
    let k = fwd.logits().len();
    match *spec {
        MarginSpec::SingleLabel { class } => {
            if k < 2 {
                return Err(Error::invalid(format!("single-label margin needs K >= 2, got {k}")));
            }
            check_class(class, k)?;
            let own = fwd.graph.pick(fwd.logits, class)?;
            let others: Vec<usize> = competitors(k, class).collect();
            let rival = fwd.graph.max_over(fwd.logits, &others)?;
            fwd.graph.sub(own, rival)
        }
        MarginSpec::MultiLabel {
            class,
            suppress_all_regions,
        } => {
            check_class(class, k)?;
            match (fwd.response_map, suppress_all_regions) {
                (Some(map), true) => {
                    let shape = fwd.graph.value(map).shape().to_vec();
                    let plane = shape[1] * shape[2];
                    let cells: Vec<usize> = (class * plane..(class + 1) * plane).collect();
                    fwd.graph.max_over(map, &cells)
                }
                _ => fwd.graph.pick(fwd.logits, class),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbConfig {
    /// Target margin `T`, strictly negative.
    pub target: f64,
    /// Pixel-space weight `lambda`.
    pub lambda: f64,
    /// Perceptual weight `lambda'`.
    pub lambda_prime: f64,
    pub layer_set: LayerSet,
    /// Initial trial step of every line search.
    pub step_size: f64,
    pub max_iters: usize,
    /// Stop once `(M - T)^2` falls below this.
    pub stop_tol: f64,
    /// Halve the step until the objective decreases (at most `max_halvings`
    /// times). Without it every step is taken as is.
    pub backtracking: bool,
    pub max_halvings: usize,
    /// Start each line search at twice the previously accepted step
    /// (capped at `step_size`) instead of at `step_size`.
    pub warm_start: bool,
    /// Clamp the returned `x'` to `[0,1]` after optimization.
    pub clamp_output: bool,
    /// Recorded for provenance; the optimizer itself draws no randomness.
    pub seed: u64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            target: -2.0,
            lambda: 1.0,
            lambda_prime: 10_000.0,
            layer_set: LayerSet::empty(),
            step_size: 0.1,
            max_iters: 2000,
            stop_tol: 1e-2,
            backtracking: true,
            max_halvings: 20,
            warm_start: false,
            clamp_output: false,
            seed: 0,
        }
    }
}

impl PerturbConfig {
    /// Weak-localization and insertion/deletion setting: `T=-2, lambda'=1e4, lambda=1`.
    pub fn localization(layer_set: LayerSet) -> Self {
        Self {
            layer_set,
            ..Self::default()
        }
    }

    /// Pointing-game setting: `T=-10, lambda'=1e3, lambda=1`.
    pub fn pointing(layer_set: LayerSet) -> Self {
        Self {
            target: -10.0,
            lambda_prime: 1_000.0,
            layer_set,
            ..Self::default()
        }
    }

    /// True when the perceptual term takes part in the objective.
    pub fn uses_perceptual(&self) -> bool {
        self.lambda_prime != 0.0 && !self.layer_set.is_empty()
    }

    pub fn validate(&self, net: &Network) -> Result<()> {
        if !(self.target < 0.0) {
            return Err(Error::invalid(format!("target margin must be < 0, got {}", self.target)));
        }
        if !(self.lambda >= 0.0) || !(self.lambda_prime >= 0.0) {
            return Err(Error::invalid("lambda and lambda_prime must be >= 0"));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be >= 1"));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::invalid("step_size must be > 0"));
        }
        self.layer_set.validate(net.spec())
    }
}

/// Value of the objective at one point, split into its terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveTerms {
    pub value: f64,
    pub margin: f64,
    /// Unweighted `sum_l ||C_l(x') - C_l(x)||^2` (0 when the term is absent).
    pub perceptual: f64,
    /// Unweighted `||x' - x||^2`.
    pub pixel: f64,
}

/// A recorded objective evaluation; call [`gradient`](Self::gradient) for
/// the input gradient.
#[derive(Debug, Clone)]
pub struct Objective {
    pub graph: CompGraph,
    pub input: NodeId,
    pub value_node: NodeId,
    pub terms: ObjectiveTerms,
}

impl Objective {
    pub fn value(&self) -> f64 {
        self.terms.value
    }

    pub fn gradient(&self) -> Result<Tensor> {
        let grads = self.graph.backward(self.value_node)?;
        Ok(grads.get_or_zeros(&self.graph, self.input))
    }
}

/// Objective for one clean image, with the clean activations frozen.
#[derive(Debug, Clone)]
pub struct Problem<'a> {
    net: &'a Network,
    x: Tensor,
    spec: MarginSpec,
    cfg: PerturbConfig,
    reference: Vec<(usize, Tensor)>,
}

impl<'a> Problem<'a> {
    pub fn new(x: &Tensor, net: &'a Network, spec: MarginSpec, cfg: &PerturbConfig) -> Result<Self> {
        cfg.validate(net)?;
        let reference = if cfg.uses_perceptual() {
            let clean = forward_full(net, x)?;
            cfg.layer_set
                .ordinals()
                .into_iter()
                .map(|l| (l, clean.activation(l).clone()))
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            net,
            x: x.clone(),
            spec,
            cfg: cfg.clone(),
            reference,
        })
    }

    pub fn evaluate(&self, x_prime: &Tensor) -> Result<Objective> {
        self.x.expect_same_shape(x_prime)?;
        let mut fwd = forward_full(self.net, x_prime)?;
        let m = margin_node(&mut fwd, &self.spec)?;
        let g = &mut fwd.graph;
        let shifted = g.add_scalar(m, -self.cfg.target)?;
        let mut total = g.square(shifted)?;
        let mut perceptual = 0.0;
        if self.cfg.uses_perceptual() {
            let mut acc: Option<NodeId> = None;
            for (l, reference) in &self.reference {
                let d = g.squared_distance(fwd.activations[*l], reference)?;
                acc = Some(match acc {
                    None => d,
                    Some(a) => g.add(a, d)?,
                });
            }
            let acc = acc.expect("non-empty layer set");
            perceptual = g.value(acc).data()[0];
            let weighted = g.scale(acc, self.cfg.lambda_prime)?;
            total = g.add(total, weighted)?;
        }
        let pix = g.squared_distance(fwd.input, &self.x)?;
        let pixel = g.value(pix).data()[0];
        if self.cfg.lambda != 0.0 {
            let weighted = g.scale(pix, self.cfg.lambda)?;
            total = g.add(total, weighted)?;
        }
        let terms = ObjectiveTerms {
            value: g.value(total).data()[0],
            margin: g.value(m).data()[0],
            perceptual,
            pixel,
        };
        Ok(Objective {
            graph: fwd.graph,
            input: fwd.input,
            value_node: total,
            terms,
        })
    }

    fn stop_residual(&self, margin: f64) -> f64 {
        let d = margin - self.cfg.target;
        d * d
    }
}

/// Evaluates the objective at `x_prime` for clean image `x`.
pub fn objective(
    x_prime: &Tensor,
    x: &Tensor,
    net: &Network,
    spec: &MarginSpec,
    cfg: &PerturbConfig,
) -> Result<Objective> {
    Problem::new(x, net, *spec, cfg)?.evaluate(x_prime)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbResult {
    pub x_prime: Tensor,
    pub final_margin: f64,
    pub final_objective: f64,
    pub iterations_used: usize,
    /// Objective after each accepted step.
    pub objective_trajectory: Vec<f64>,
    /// `(M - T)^2 < stop_tol` at the returned point.
    pub converged: bool,
    /// Pixels of `x'` outside `[0,1]` before any clamping.
    pub out_of_range: usize,
}

/// Steepest descent with backtracking from `x' = x`.
///
/// Each iteration tries `x' - step * grad` starting from `cfg.step_size`
/// (or, with `warm_start`, from twice the last accepted step) and halves
/// the step until the objective decreases. Stops when the margin
/// residual is below `stop_tol`, after `max_iters` steps, or when no
/// decrease is found within `max_halvings`.
pub fn find_perturbation(
    x: &Tensor,
    net: &Network,
    spec: &MarginSpec,
    cfg: &PerturbConfig,
) -> Result<PerturbResult> {
    let problem = Problem::new(x, net, *spec, cfg)?;
    let mut current = problem.evaluate(x)?;
    if !current.value().is_finite() {
        return Err(Error::NonFinite {
            iteration: 0,
            value: current.value(),
        });
    }
    let mut x_prime = x.clone();
    let mut trajectory = Vec::new();
    let mut last_step = cfg.step_size;
    while trajectory.len() < cfg.max_iters
        && problem.stop_residual(current.terms.margin) >= cfg.stop_tol
    {
        let grad = current.gradient()?;
        let mut step = if cfg.warm_start {
            (2.0 * last_step).min(cfg.step_size)
        } else {
            cfg.step_size
        };
        let mut accepted = None;
        for _ in 0..=cfg.max_halvings {
            let cand = x_prime.zip_map(&grad, |v, g| v - step * g)?;
            let eval = problem.evaluate(&cand)?;
            if !cfg.backtracking || eval.value() < current.value() {
                last_step = step;
                accepted = Some((cand, eval));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, eval)) = accepted else {
            log::debug!("line search stalled after {} steps", trajectory.len());
            break;
        };
        if !eval.value().is_finite() {
            return Err(Error::NonFinite {
                iteration: trajectory.len() + 1,
                value: eval.value(),
            });
        }
        trajectory.push(eval.value());
        x_prime = cand;
        current = eval;
    }
    let out_of_range = x_prime.data().iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
    if cfg.clamp_output {
        x_prime = x_prime.map(|v| v.clamp(0.0, 1.0));
        current = problem.evaluate(&x_prime)?;
    }
    Ok(PerturbResult {
        final_margin: current.terms.margin,
        final_objective: current.value(),
        iterations_used: trajectory.len(),
        objective_trajectory: trajectory,
        converged: problem.stop_residual(current.terms.margin) < cfg.stop_tol,
        out_of_range,
        x_prime,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NetworkSpec;
    use proptest::prelude::*;

    #[test]
    fn single_label_examples() {
        let s = MarginSpec::SingleLabel { class: 0 };
        assert_eq!(margin(&Tensor::from_vec(vec![2.0, 0.5, -1.0]), &s).unwrap(), 1.5);
        assert_eq!(margin(&Tensor::from_vec(vec![1.0, 1.0]), &s).unwrap(), 0.0);
        assert!(margin(&Tensor::from_vec(vec![1.0]), &s).is_err());
        assert!(margin(&Tensor::from_vec(vec![1.0, 2.0]), &MarginSpec::SingleLabel { class: 2 }).is_err());
    }

    #[test]
    fn multi_label_examples() {
        let map = Tensor::new(vec![2, 2], vec![0.2, -0.3, 0.7, 0.1]).unwrap();
        let s = MarginSpec::MultiLabel {
            class: 0,
            suppress_all_regions: true,
        };
        assert_eq!(margin(&map, &s).unwrap(), 0.7);
        let scores = Tensor::from_vec(vec![0.4, -1.0, 2.5]);
        let plain = MarginSpec::MultiLabel {
            class: 2,
            suppress_all_regions: false,
        };
        assert_eq!(margin(&scores, &plain).unwrap(), 2.5);
        assert!(margin(&map, &plain).is_err());
        let cube = Tensor::new(vec![2, 1, 2], vec![0.1, 0.3, -0.5, -0.2]).unwrap();
        let s1 = MarginSpec::MultiLabel {
            class: 1,
            suppress_all_regions: true,
        };
        assert_eq!(margin(&cube, &s1).unwrap(), -0.2);
    }

    proptest! {
        #[test]
        fn margin_sign_matches_classification(v in proptest::collection::vec(-3i32..3, 2..6), class in 0usize..6) {
            let logits: Vec<f64> = v.iter().map(|&x| f64::from(x) * 0.5).collect();
            prop_assume!(class < logits.len());
            let t = Tensor::from_vec(logits.clone());
            let m = margin(&t, &MarginSpec::SingleLabel { class }).unwrap();
            // label i is assigned only when it strictly beats every rival
            let assigned = (0..logits.len()).all(|j| j == class || logits[class] > logits[j]);
            prop_assert_eq!(m <= 0.0, !assigned);
        }
    }

    fn tiny_net() -> Network {
        let spec = NetworkSpec::mini_vgg(3, 32);
        Network::init(spec, 4).unwrap()
    }

    fn image(seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![3, 32, 32], (0..3072).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn objective_at_clean_image_is_margin_term() {
        let net = tiny_net();
        let x = image(1);
        let spec = MarginSpec::SingleLabel { class: 1 };
        let cfg = PerturbConfig::localization(LayerSet::range(0, 5));
        let obj = objective(&x, &x, &net, &spec, &cfg).unwrap();
        let m = margin(&crate::model::predict(&net, &x).unwrap(), &spec).unwrap();
        assert_eq!(obj.terms.margin, m);
        assert_eq!(obj.value(), (m + 2.0) * (m + 2.0));
        assert_eq!(obj.terms.perceptual, 0.0);
        assert_eq!(obj.terms.pixel, 0.0);
    }

    #[test]
    fn lambda_prime_zero_reduces_to_pixel_objective() {
        let net = tiny_net();
        let x = image(2);
        let xp = x.map(|v| v + 0.01);
        let spec = MarginSpec::SingleLabel { class: 0 };
        let cfg = PerturbConfig {
            lambda_prime: 0.0,
            layer_set: LayerSet::range(1, 4),
            lambda: 3.0,
            ..PerturbConfig::default()
        };
        let obj = objective(&xp, &x, &net, &spec, &cfg).unwrap();
        let m = margin(&crate::model::predict(&net, &xp).unwrap(), &spec).unwrap();
        let pix = xp.sub(&x).unwrap().sq_norm();
        assert!((obj.value() - ((m + 2.0).powi(2) + 3.0 * pix)).abs() < 1e-12);
    }

    #[test]
    fn one_iteration_moves_the_image() {
        let net = tiny_net();
        let x = image(3);
        let cfg = PerturbConfig {
            max_iters: 1,
            layer_set: LayerSet::range(0, 2),
            ..PerturbConfig::default()
        };
        let r = find_perturbation(&x, &net, &MarginSpec::SingleLabel { class: 0 }, &cfg).unwrap();
        assert_eq!(r.iterations_used, 1);
        assert_eq!(r.objective_trajectory.len(), 1);
        assert!(r.x_prime.sub(&x).unwrap().sq_norm() > 0.0);
    }

    #[test]
    fn trajectory_is_non_increasing() {
        let net = tiny_net();
        let x = image(4);
        let cfg = PerturbConfig {
            max_iters: 15,
            layer_set: LayerSet::range(1, 3),
            ..PerturbConfig::default()
        };
        let r = find_perturbation(&x, &net, &MarginSpec::SingleLabel { class: 2 }, &cfg).unwrap();
        assert_eq!(r.objective_trajectory.len(), r.iterations_used);
        for w in r.objective_trajectory.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert_eq!(r.x_prime.shape(), x.shape());
    }

    #[test]
    fn config_validation() {
        let net = tiny_net();
        let x = image(5);
        let spec = MarginSpec::SingleLabel { class: 0 };
        let bad_target = PerturbConfig {
            target: 0.0,
            ..PerturbConfig::default()
        };
        assert!(find_perturbation(&x, &net, &spec, &bad_target).is_err());
        let bad_layers = PerturbConfig::localization(LayerSet::range(0, 9));
        assert!(objective(&x, &x, &net, &spec, &bad_layers).is_err());
        let zero_iters = PerturbConfig {
            max_iters: 0,
            ..PerturbConfig::default()
        };
        assert!(find_perturbation(&x, &net, &spec, &zero_iters).is_err());
    }

    #[test]
    fn clamp_flag_keeps_pixels_in_range() {
        let net = tiny_net();
        let x = image(6);
        let cfg = PerturbConfig {
            max_iters: 5,
            step_size: 5.0,
            backtracking: false,
            clamp_output: true,
            lambda_prime: 0.0,
            ..PerturbConfig::default()
        };
        let r = find_perturbation(&x, &net, &MarginSpec::SingleLabel { class: 1 }, &cfg).unwrap();
        assert!(r.x_prime.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
