use morlaif_core::data::{generate_pairs, Annotators};
use morlaif_core::logistic::objective;
use morlaif_core::pm::{fit_pm, pm_accuracy, FeatureMap, FitConfig};
use morlaif_core::rng;
use morlaif_core::world::{make_world, AnnotatorTemps, Policy, PolicyTag, WorldConfig};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

const TRAIN: usize = 10_000;
const TEST: usize = 5_000;

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn principle_models_recover_their_parameters() {
    for seed in 0..5 {
        let cfg = WorldConfig {
            annotator_temps: AnnotatorTemps::Explicit { temps: vec![0.5; 12] },
            ..Default::default()
        };
        let (world, space) = make_world(&cfg, seed).unwrap();
        let uniform = Policy::uniform(space.n_prompts, space.n_templates, PolicyTag::SftReference);
        let mut r = rng::stream(seed, "recover-pairs", 0);
        let pairs = generate_pairs(&space, &uniform, TRAIN + TEST, &mut r).unwrap();
        let names: std::sync::Arc<[String]> = (0..12).map(|i| format!("p{i}")).collect();
        let labels = Annotators::new(&world, &space, names)
            .unwrap()
            .label_all_principles(&pairs, seed);
        for (i, recs) in labels.iter().enumerate() {
            let (train, test) = recs.split_at(TRAIN);
            let pm = fit_pm(train, &space, &FeatureMap::Identity, &FitConfig::default()).unwrap();
            let acc = pm_accuracy(&pm, &space, test).unwrap();
            let cos = cosine(&pm.theta_hat, &world.principle_params[i]);
            assert!(acc >= 0.9, "seed {seed} principle {i}: accuracy {acc}");
            assert!(cos >= 0.95, "seed {seed} principle {i}: cosine {cos}");
        }
    }
}

#[test]
fn gradient_matches_central_differences() {
    let mut r = rng::stream(11, "fd", 0);
    let d = 6;
    let x: Vec<Vec<f64>> = (0..200)
        .map(|_| (0..d).map(|_| 2.0 * Distribution::<f64>::sample(&StandardNormal, &mut r)).collect())
        .collect();
    let t: Vec<f64> = (0..200).map(|_| [0.0, 0.5, 1.0][r.random_range(0..3)]).collect();
    for trial in 0..20 {
        let coef: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut r)).collect();
        let l2 = if trial % 2 == 0 { 0.0 } else { 0.1 };
        let (_, grad) = objective(&coef, &x, &t, l2);
        for j in 0..d {
            let h = 1e-5;
            let mut up = coef.clone();
            let mut down = coef.clone();
            up[j] += h;
            down[j] -= h;
            let fd = (objective(&up, &x, &t, l2).0 - objective(&down, &x, &t, l2).0) / (2.0 * h);
            let rel = (fd - grad[j]).abs() / grad[j].abs().max(1e-3);
            assert!(rel <= 1e-6, "coordinate {j}: analytic {} vs {fd} (rel {rel:e})", grad[j]);
        }
    }
}
