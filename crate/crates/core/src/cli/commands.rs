use std::fs;
use std::path::Path;
use std::time::Instant;

use serde_json::{json, Value};

use super::{usage, Command, Failure, RunConfig, Target};
use crate::container;
use crate::data::{gen_shapes, load_dataset, read_ppm, save_dataset, write_ppm, Dataset, Sample};
use crate::error::{Error, Result};
use crate::eval::report::{config_hash, write_summary, Table};
use crate::eval::{
    cached_saliency, full_grid, game_items, insertion_deletion, perturb_items, pointing_game, run_ablation,
    sanity_check, weak_localization, weight_layer_positions, Game, GameOptions, LocalizationGrid,
};
use crate::model::{predict, train, Network};
use crate::perturb::{find_perturbation, MarginSpec, PerturbConfig};
use crate::saliency;
use crate::tensor::Tensor;

type Outcome = std::result::Result<(), Failure>;

/// Runs one command, then records `run.json` whatever the outcome.
pub(super) fn dispatch(cmd: &Command, cfg: &RunConfig, out: &Path, started: Instant) -> Outcome {
    fs::create_dir_all(out).map_err(|e| usage(Error::io(out, e)))?;
    let ctx = Ctx {
        cfg,
        out,
        hash: config_hash(&cfg.to_value()),
    };
    let result = match cmd {
        Command::GenData { .. } => ctx.gen_data(),
        Command::Train { .. } => ctx.train(),
        Command::Perturb { target, .. } => ctx.perturb(target),
        Command::Saliency { target, normalize, .. } => ctx.saliency(target, *normalize),
        Command::EvalLocalization { .. } => ctx.localization(),
        Command::EvalInsdel { .. } => ctx.insdel(),
        Command::EvalPointing { .. } => ctx.pointing(),
        Command::Ablate { .. } => ctx.ablate(),
        Command::SanityCheck { .. } => ctx.sanity(),
    };
    let status = match &result {
        Ok(()) => "ok".to_string(),
        Err(f) => format!("failed: {f}"),
    };
    let run = json!({
        "command": cmd.name(),
        "config": cfg.to_value(),
        "config_hash": ctx.hash,
        "seed": cfg.seed,
        "version": env!("CARGO_PKG_VERSION"),
        "workers": rayon::current_num_threads(),
        "wall_time_s": started.elapsed().as_secs_f64(),
        "status": status,
    });
    let path = out.join("run.json");
    let text = serde_json::to_string_pretty(&run).map_err(Error::from)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    result
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    out: &'a Path,
    hash: String,
}

impl Ctx<'_> {
    fn samples(&self) -> std::result::Result<Dataset, Failure> {
        let dir = &self.cfg.data.dir;
        if !dir.join("manifest.json").is_file() {
            return Err(usage(format!("no dataset at {} (run gen-data first)", dir.display())));
        }
        let mut ds = load_dataset(dir)?;
        if let Some(n) = self.cfg.data.limit {
            ds.samples.truncate(n);
        }
        if ds.samples.is_empty() {
            return Err(usage("dataset selection is empty"));
        }
        Ok(ds)
    }

    fn network(&self) -> std::result::Result<Network, Failure> {
        let path = &self.cfg.model.path;
        if !path.is_file() {
            return Err(usage(format!("no weight file at {} (run train first)", path.display())));
        }
        let net = Network::load(path)?;
        self.cfg.perturb.validate(&net).map_err(usage)?;
        if !(self.cfg.saliency.sigma >= 0.0) {
            return Err(usage("saliency.sigma must be >= 0"));
        }
        Ok(net)
    }

    fn summary(&self, name: &str, aggregates: Value) -> Result<()> {
        write_summary(&self.out.join(name), &self.cfg.to_value(), &aggregates)
    }

    fn table(&self, name: &str, t: &Table) -> Result<()> {
        t.write(&self.out.join(name))
    }

    fn gen_data(&self) -> Outcome {
        let d = &self.cfg.data;
        let samples = gen_shapes(d.count, d.size, d.num_classes, d.difficult_fraction, self.cfg.seed).map_err(usage)?;
        let n = samples.len();
        save_dataset(
            &Dataset {
                num_classes: d.num_classes,
                samples,
            },
            self.out,
        )?;
        println!("wrote {n} samples to {}", self.out.display());
        Ok(())
    }

    fn train(&self) -> Outcome {
        let ds = self.samples()?;
        let size = ds.samples[0].height();
        let spec = self.cfg.model.spec(ds.num_classes, size);
        let net = train(&spec, &ds.samples, &self.cfg.train)?;
        let path = self.out.join("model.pbw");
        net.save_weights(&path)?;
        let acc = net.train_accuracy.unwrap_or(f64::NAN);
        self.summary("train.json", json!({ "train_accuracy": acc, "samples": ds.samples.len() }))?;
        println!("train accuracy {acc:.4}; weights in {}", path.display());
        Ok(())
    }

    /// The image and class one-image commands explain.
    fn pick(&self, net: &Network, t: &Target) -> std::result::Result<(Tensor, usize, Value), Failure> {
        let (image, class, origin) = if let Some(p) = &t.image {
            if !p.is_file() {
                return Err(usage(format!("no image at {}", p.display())));
            }
            let img = read_ppm(p)?;
            let class = match t.class {
                Some(c) => c,
                None => predict(net, &img).map_err(usage)?.argmax(),
            };
            (img, class, json!({ "image": p }))
        } else {
            let ds = self.samples()?;
            let id = t.sample.unwrap_or(ds.samples[0].id);
            let s = ds
                .samples
                .into_iter()
                .find(|s| s.id == id)
                .ok_or_else(|| usage(format!("no sample with id {id}")))?;
            let class = t.class.unwrap_or(s.label);
            (s.image, class, json!({ "sample": id }))
        };
        if class >= net.num_classes() {
            return Err(usage(format!("class {class} out of range for {} classes", net.num_classes())));
        }
        Ok((image, class, origin))
    }

    fn perturb(&self, t: &Target) -> Outcome {
        let net = self.network()?;
        let (x, class, origin) = self.pick(&net, t)?;
        let r = find_perturbation(&x, &net, &MarginSpec::for_network(&net, class), &self.cfg.perturb)?;
        container::write(
            &self.out.join("perturbation.tns"),
            &json!({ "class": class, "config_hash": self.hash }),
            &[("x".to_string(), &x), ("x_prime".to_string(), &r.x_prime)],
        )?;
        write_ppm(&r.x_prime, &self.out.join("x_prime.ppm"))?;
        self.summary(
            "perturb.json",
            json!({
                "input": origin,
                "class": class,
                "final_margin": r.final_margin,
                "final_objective": r.final_objective,
                "iterations_used": r.iterations_used,
                "converged": r.converged,
                "out_of_range": r.out_of_range,
                "objective_trajectory": r.objective_trajectory,
            }),
        )?;
        println!(
            "class {class}: margin {:.4} after {} iterations (converged: {})",
            r.final_margin, r.iterations_used, r.converged
        );
        Ok(())
    }

    fn saliency(&self, t: &Target, normalize: bool) -> Outcome {
        let net = self.network()?;
        let (x, class, origin) = self.pick(&net, t)?;
        let r = find_perturbation(&x, &net, &MarginSpec::for_network(&net, class), &self.cfg.perturb)?;
        let s = &self.cfg.saliency;
        let map = saliency::build(&x, &r.x_prime, &net, class, s.sigma, s.guided, normalize)?
            .with_layer_set(self.cfg.perturb.layer_set.clone());
        map.save(&self.out.join("saliency"))?;
        self.summary(
            "saliency.json",
            json!({
                "input": origin,
                "class": class,
                "final_margin": r.final_margin,
                "converged": r.converged,
                "max": map.values.max(),
            }),
        )?;
        println!("saliency for class {class} in {}", self.out.join("saliency.pgm").display());
        Ok(())
    }

    fn cache(&self, net: &Network, samples: &[Sample], opts: &GameOptions) -> Result<crate::eval::PerturbationCache> {
        let items = game_items(samples, opts);
        log::info!("perturbing {} items", items.len());
        perturb_items(net, &items, &self.cfg.perturb)
    }

    fn localization(&self) -> Outcome {
        let net = self.network()?;
        let ds = self.samples()?;
        let c = &self.cfg.localization;
        if c.strategies.is_empty() || !(c.alpha_step > 0.0) {
            return Err(usage("localization needs strategies and alpha_step > 0"));
        }
        let cache = self.cache(&net, &ds.samples, &GameOptions::new(Game::Localization))?;
        let sal = cached_saliency(&net, &cache, self.cfg.saliency.guided, true, self.cfg.saliency.sigma);
        let grid = LocalizationGrid {
            kinds: c.strategies.clone(),
            step: c.alpha_step,
        };
        let r = weak_localization(&ds.samples, &sal, &grid)?;
        self.table("localization.csv", &r.table(&self.hash))?;
        self.summary("localization.json", r.aggregates())?;
        println!("best localization error {:.4}", r.best_error());
        Ok(())
    }

    fn insdel(&self) -> Outcome {
        let net = self.network()?;
        let ds = self.samples()?;
        let c = &self.cfg.insdel;
        if c.steps == 0 {
            return Err(usage("insdel.steps must be >= 1"));
        }
        let cache = self.cache(&net, &ds.samples, &GameOptions::new(Game::Deletion))?;
        let sal = cached_saliency(&net, &cache, self.cfg.saliency.guided, false, self.cfg.saliency.sigma);
        let r = insertion_deletion(&ds.samples, &net, &sal, c.steps, c.sigma_base)?;
        self.table("insdel.csv", &r.table(&self.hash))?;
        self.summary("insdel.json", r.aggregates())?;
        println!("deletion AUC {:.4}, insertion AUC {:.4}", r.mean_deletion(), r.mean_insertion());
        Ok(())
    }

    fn pointing(&self) -> Outcome {
        let net = self.network()?;
        let ds = self.samples()?;
        let p = &self.cfg.pointing;
        if p.resize != crate::eval::Resize::None && !net.spec().is_fully_convolutional() {
            return Err(usage("the upscale variant needs a fully convolutional network (arch mini_vgg_detector)"));
        }
        let (sigma, guided, cfg) = (self.cfg.saliency.sigma, self.cfg.saliency.guided, &self.cfg.perturb);
        // computed per item so upscaled inputs get their own perturbation
        let sal = |s: &Sample, class: usize| -> Result<Tensor> {
            let r = find_perturbation(&s.image, &net, &MarginSpec::for_network(&net, class), cfg)?;
            Ok(saliency::build(&s.image, &r.x_prime, &net, class, sigma, guided, false)?.values)
        };
        let r = pointing_game(&ds.samples, p.targets, &sal, p.tolerance_px, p.resize)?;
        self.table("pointing.csv", &r.table(&self.hash))?;
        self.summary("pointing.json", r.aggregates())?;
        println!("pointing accuracy {:.4}", r.accuracy());
        Ok(())
    }

    fn ablate(&self) -> Outcome {
        let cfg = self.cfg;
        let base = PerturbConfig {
            layer_set: crate::model::LayerSet::empty(),
            ..cfg.perturb.clone()
        };
        let relaxed = RunConfig {
            perturb: base.clone(),
            ..cfg.clone()
        };
        let net = Ctx {
            cfg: &relaxed,
            out: self.out,
            hash: self.hash.clone(),
        }
        .network()?;
        let ds = self.samples()?;
        let a = &cfg.ablate;
        let n = net.spec().num_relus();
        let cells = if a.cells.is_empty() { full_grid(n) } else { a.cells.clone() };
        if let Some((i, j)) = cells.iter().find(|&&(i, j)| i > j || j > n) {
            return Err(usage(format!("cell ({i},{j}) is not a range within 0..={n}")));
        }
        if a.sigmas.is_empty() || a.sigmas.iter().any(|s| !(*s >= 0.0)) {
            return Err(usage("ablate.sigmas must be a non-empty list of values >= 0"));
        }
        let opts = GameOptions {
            game: a.game,
            guided: cfg.saliency.guided,
            alpha_step: cfg.localization.alpha_step,
            steps: cfg.insdel.steps,
            sigma_base: cfg.insdel.sigma_base,
            tolerance_px: cfg.pointing.tolerance_px,
            targets: cfg.pointing.targets,
        };
        let r = run_ablation(&net, &ds.samples, &base, &opts, &cells, &a.sigmas, a.bar)?;
        self.table("ablation.csv", &r.long_table(&self.hash))?;
        self.table("ablation_matrix.csv", &r.matrix().stamped(&self.hash))?;
        self.table("ablation_counts.csv", &r.count_matrix().stamped(&self.hash))?;
        self.summary("ablation.json", r.aggregates())?;
        println!("{} cells x {} sigmas", cells.len(), a.sigmas.len());
        Ok(())
    }

    fn sanity(&self) -> Outcome {
        let net = self.network()?;
        let ds = self.samples()?;
        let depths = &self.cfg.sanity.depths;
        let max = weight_layer_positions(&net).len();
        if depths.is_empty() || depths.iter().any(|&d| d > max) {
            return Err(usage(format!("sanity.depths must be non-empty and at most {max}")));
        }
        let r = sanity_check(
            &net,
            &ds.samples,
            depths,
            self.cfg.seed,
            &self.cfg.perturb,
            self.cfg.saliency.sigma,
            self.cfg.pointing.tolerance_px,
        )?;
        self.table("sanity.csv", &r.table(&self.hash))?;
        self.summary("sanity.json", r.aggregates())?;
        let acc: Vec<String> = r.accuracies().iter().map(|a| format!("{a:.3}")).collect();
        println!("pointing accuracy by depth: {} (chance {:.3})", acc.join(" "), r.chance);
        Ok(())
    }
}
