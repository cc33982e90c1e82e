//! One runner per experiment kind. Each turns a manifest into rows and
//! self-checks; networks and fits come from the shared [`Lab`].

use std::time::Instant;

use stitchlab_core::data::subset;
use stitchlab_core::metrics::{augment_spurious, cka_curve, extract_repr, linear_cka, Pooling};
use stitchlab_core::stitching::{PenaltyReport, Spurious, StitchFamily};

use crate::error::{Context, Result};
use crate::lab::{par_map, DataVariant, Init, Lab, Net, Recipe};
use crate::manifest::*;
use crate::report::{Check, Environment, Row, RunResult, VariantReport};

/// Runs `manifest` against `lab`, fitting up to `jobs` stitchers at once.
pub fn run(manifest: &Manifest, lab: &Lab, jobs: usize) -> Result<RunResult> {
    manifest.validate()?;
    let started = Instant::now();
    let mut r = Runner {
        m: manifest,
        lab,
        jobs: jobs.max(1),
        out: RunResult {
            experiment_id: manifest.id.clone(),
            kind: manifest.experiment.kind().to_string(),
            manifest_digest: manifest.digest(),
            rows: Vec::new(),
            checks: Vec::new(),
            reports: Vec::new(),
            wall_clock_s: 0.0,
            environment: Environment::current(),
        },
    };
    match &manifest.experiment {
        Experiment::Connectivity(e) => r.connectivity(e)?,
        Experiment::RandomSanity(e) => r.random_sanity(e)?,
        Experiment::MoreData(e) => r.more_data(e)?,
        Experiment::MoreTime(e) => r.more_time(e)?,
        Experiment::MoreWidth(e) => r.more_width(e)?,
        Experiment::LabelQuality(e) => r.label_quality(e)?,
        Experiment::KernelAblation(e) => r.kernel_ablation(e)?,
        Experiment::FinetuneBaseline(e) => r.finetune_baseline(e)?,
        Experiment::FreezeTraining(e) => r.freeze_training(e)?,
        Experiment::CkaCompare(e) => r.cka_compare(e)?,
    }
    let mut out = r.out;
    out.sort_rows();
    for v in &mut out.reports {
        v.report.experiment_id = out.experiment_id.clone();
    }
    out.wall_clock_s = started.elapsed().as_secs_f64();
    Ok(out)
}

/// Cuts in the deeper half of a network with `depth` blocks.
pub fn is_deep(cut: usize, depth: usize) -> bool {
    2 * cut > depth
}

fn fmt_points(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

struct Runner<'a> {
    m: &'a Manifest,
    lab: &'a Lab,
    jobs: usize,
    out: RunResult,
}

impl Runner<'_> {
    fn recipe(&self, width: f64, seed: u64, data: DataVariant) -> Result<Recipe> {
        let mut spec = self.m.spec(width)?;
        if data == DataVariant::Coarse {
            spec.classes = self.lab.coarse_classes();
        }
        Ok(Recipe {
            spec,
            seed,
            data,
            train: self.m.train.config(seed),
            init: Init::Fresh,
        })
    }

    /// Trained on the full training set at the manifest width.
    fn trained(&self, seed: u64) -> Result<Net> {
        self.lab
            .model(&self.recipe(self.m.width, seed, DataVariant::Full)?)
    }

    /// Initialization only: the same recipe with a zero-step budget.
    fn untrained_recipe(&self, seed: u64) -> Result<Recipe> {
        let mut r = self.recipe(self.m.width, seed, DataVariant::Full)?;
        r.train = TrainBudget {
            steps: 0,
            ..self.m.train.clone()
        }
        .config(seed);
        Ok(r)
    }

    fn untrained(&self, seed: u64) -> Result<Net> {
        self.lab.model(&self.untrained_recipe(seed)?)
    }

    fn row(&mut self, variant: &str, cut: Option<usize>, metric: &str, value: f64, seed: u64) {
        self.out.rows.push(Row {
            experiment_id: self.m.id.clone(),
            kind: self.out.kind.clone(),
            variant: variant.to_string(),
            cut,
            metric: metric.to_string(),
            value,
            seed,
        });
    }

    fn check(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.out.checks.push(Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }

    fn error_row(
        &mut self,
        variant: &str,
        cut: Option<usize>,
        net: &Net,
        seed: u64,
    ) -> Result<f64> {
        let e = self.lab.test_error(net)?;
        self.row(variant, cut, "error", e, seed);
        Ok(e)
    }

    /// Stitches `bottom` into `top` at each cut with `family` (identity at
    /// cut 0) and records the reports under `variant`.
    fn curve_with(
        &mut self,
        variant: &str,
        top: &Net,
        bottom: &Net,
        cuts: &[usize],
        family: StitchFamily,
        spurious: Option<Spurious>,
    ) -> Result<Vec<PenaltyReport>> {
        let (lab, budget) = (self.lab, &self.m.stitch);
        let reports = par_map(self.jobs, cuts, |&cut| {
            let family = if cut == 0 {
                StitchFamily::Identity
            } else {
                family
            };
            lab.stitch_best(top, bottom, cut, family, budget, spurious)
        })
        .context(|| format!("variant {variant}"))?;
        for r in &reports {
            self.row(variant, Some(r.cut), "penalty", r.penalty, r.seed);
            self.row(
                variant,
                Some(r.cut),
                "stitched_error",
                r.stitched_error,
                r.seed,
            );
            self.row(
                variant,
                Some(r.cut),
                "stitched_cross_entropy",
                r.stitched_cross_entropy,
                r.seed,
            );
            self.row(variant, Some(r.cut), "top_error", r.top_error, r.seed);
            if let Some(b) = r.bottom_error {
                self.row(variant, Some(r.cut), "bottom_error", b, r.seed);
            }
            self.out.reports.push(VariantReport {
                variant: variant.to_string(),
                report: r.clone(),
            });
        }
        Ok(reports)
    }

    fn curve(&mut self, variant: &str, top: &Net, bottom: &Net) -> Result<Vec<PenaltyReport>> {
        let cuts = self.m.cuts()?;
        self.curve_with(variant, top, bottom, &cuts, self.m.stitch.family(), None)
    }

    fn connectivity(&mut self, e: &Connectivity) -> Result<()> {
        let mut cuts = self.m.cuts()?;
        if !cuts.contains(&0) {
            cuts.insert(0, 0);
        }
        let family = self.m.stitch.family();
        let a = self.trained(self.m.seed)?;
        let mut variants: Vec<(&str, Net, Net, f64)> = Vec::new();
        let b = self.trained(e.bottom_seed)?;
        variants.push(("two_seed", a.clone(), b, e.max_penalty));
        if e.disjoint {
            let part = |index, seed| {
                self.lab.model(&self.recipe(
                    self.m.width,
                    seed,
                    DataVariant::Part {
                        k: 2,
                        index,
                        seed: e.split_seed,
                    },
                )?)
            };
            variants.push((
                "disjoint",
                part(0, self.m.seed)?,
                part(1, e.bottom_seed)?,
                e.max_penalty,
            ));
        }
        if e.self_stitch {
            variants.push(("self", a.clone(), a.clone(), e.self_max_penalty));
        }
        let random = match e.random_seed {
            Some(seed) => Some(self.untrained(seed)?),
            None => None,
        };
        for (name, top, bottom, threshold) in variants {
            let reports = self.curve_with(name, &top, &bottom, &cuts, family, None)?;
            let worst = reports.iter().map(|r| r.penalty).fold(f64::MIN, f64::max);
            self.row(name, None, "max_penalty", worst, self.m.seed);
            self.check(
                format!("{name}_connected"),
                worst <= threshold,
                format!(
                    "max penalty {} vs {}",
                    fmt_points(worst),
                    fmt_points(threshold)
                ),
            );
        }
        if let Some(r) = random {
            let reports = self.curve_with("random", &a, &r, &cuts, family, None)?;
            let worst = reports.iter().map(|r| r.penalty).fold(f64::MIN, f64::max);
            self.row("random", None, "max_penalty", worst, self.m.seed);
            self.check(
                "random_not_connected",
                worst >= e.random_min_penalty,
                format!(
                    "max penalty {} vs {}",
                    fmt_points(worst),
                    fmt_points(e.random_min_penalty)
                ),
            );
        }
        Ok(())
    }

    fn random_sanity(&mut self, e: &RandomSanity) -> Result<()> {
        let depth = self.m.depth()?;
        let a = self.trained(self.m.seed)?;
        let random = self.untrained(e.random_seed)?;
        let b = self.trained(e.reference_seed)?;
        let rp = self.curve("random", &a, &random)?;
        let bp = self.curve("two_seed", &a, &b)?;
        for (name, other) in [("random", &random), ("two_seed", &b)] {
            for (cut, v) in cka_curve(
                &a.model,
                &other.model,
                &self.lab.test,
                e.pooling,
                e.cka_examples,
                0,
            )? {
                self.row(name, Some(cut), "cka", v, 0);
            }
        }
        let (first, last) = (&rp[0], &rp[rp.len() - 1]);
        let rise = last.penalty - first.penalty;
        self.check(
            "random_penalty_rises_with_depth",
            rise >= e.min_rise,
            format!(
                "cut {} {} to cut {} {}, rise {} vs {}",
                first.cut,
                fmt_points(first.penalty),
                last.cut,
                fmt_points(last.penalty),
                fmt_points(rise),
                fmt_points(e.min_rise)
            ),
        );
        let mut gaps = Vec::new();
        for (r, t) in rp.iter().zip(&bp).filter(|(r, _)| is_deep(r.cut, depth)) {
            gaps.push((r.cut, r.penalty - t.penalty));
        }
        let passed = !gaps.is_empty() && gaps.iter().all(|g| g.1 >= e.min_gap);
        let detail = gaps
            .iter()
            .map(|(c, g)| format!("cut {c}: {}", fmt_points(*g)))
            .collect::<Vec<_>>()
            .join(", ");
        self.check(
            "random_worse_than_trained_deep",
            passed,
            format!("{detail} vs {}", fmt_points(e.min_gap)),
        );
        Ok(())
    }

    fn more_data(&mut self, e: &MoreData) -> Result<()> {
        let subset = |n| DataVariant::Subset {
            n,
            seed: e.subset_seed,
        };
        let top =
            self.lab
                .model(&self.recipe(self.m.width, self.m.seed, subset(e.top_samples))?)?;
        self.error_row("top", None, &top, self.m.seed)?;
        let mut sizes = e.sample_sizes.clone();
        sizes.sort_unstable();
        let mut curves = Vec::new();
        for &n in &sizes {
            let bottom = self
                .lab
                .model(&self.recipe(self.m.width, e.bottom_seed, subset(n))?)?;
            let name = format!("n={n}");
            self.error_row(&name, None, &bottom, e.bottom_seed)?;
            curves.push((n, self.curve(&name, &top, &bottom)?));
        }
        self.monotone("more_data_never_hurts", &curves, e.epsilon, |n| {
            format!("{n} examples")
        });
        let (n, largest) = curves.last().expect("validated non-empty");
        let best = largest.iter().map(|r| r.penalty).fold(f64::MAX, f64::min);
        self.check(
            "largest_bottom_connects",
            best <= e.epsilon,
            format!(
                "{n} examples: best penalty {} vs {}",
                fmt_points(best),
                fmt_points(e.epsilon)
            ),
        );
        Ok(())
    }

    /// Per cut, each later curve is at most `epsilon` above every earlier one.
    fn monotone<K: Copy>(
        &mut self,
        name: &str,
        curves: &[(K, Vec<PenaltyReport>)],
        eps: f64,
        label: impl Fn(K) -> String,
    ) {
        let mut failures = Vec::new();
        for (i, (ka, a)) in curves.iter().enumerate() {
            for (kb, b) in &curves[i + 1..] {
                for (ra, rb) in a.iter().zip(b) {
                    if rb.penalty > ra.penalty + eps {
                        failures.push(format!(
                            "cut {}: {} {} > {} {}",
                            ra.cut,
                            label(*kb),
                            fmt_points(rb.penalty),
                            label(*ka),
                            fmt_points(ra.penalty)
                        ));
                    }
                }
            }
        }
        let detail = if failures.is_empty() {
            format!("holds within {}", fmt_points(eps))
        } else {
            failures.join("; ")
        };
        self.check(name, failures.is_empty(), detail);
    }

    fn more_time(&mut self, e: &MoreTime) -> Result<()> {
        let run = self.recipe(self.m.width, self.m.seed, DataVariant::Full)?;
        let top = self.lab.snapshot(&run, e.top_checkpoint)?;
        self.error_row("top", None, &top, self.m.seed)?;
        let mut steps = e.checkpoints.clone();
        steps.sort_unstable();
        let mut curves = Vec::new();
        for &s in &steps {
            let bottom = self.lab.snapshot(&run, s)?;
            let name = format!("step={s}");
            self.error_row(&name, None, &bottom, self.m.seed)?;
            curves.push((s, self.curve(&name, &top, &bottom)?));
        }
        self.monotone("more_time_never_hurts", &curves, e.epsilon, |s| {
            format!("step {s}")
        });
        Ok(())
    }

    fn more_width(&mut self, e: &MoreWidth) -> Result<()> {
        let top = self.trained(self.m.seed)?;
        self.error_row("top", None, &top, self.m.seed)?;
        let mut widths = e.widths.clone();
        widths.sort_by(f64::total_cmp);
        let mut curves = Vec::new();
        for &w in &widths {
            let bottom = self
                .lab
                .model(&self.recipe(w, e.bottom_seed, DataVariant::Full)?)?;
            let name = format!("width={w}");
            self.error_row(&name, None, &bottom, e.bottom_seed)?;
            curves.push((w, self.curve(&name, &top, &bottom)?));
        }
        self.monotone("more_width_never_hurts", &curves, e.epsilon, |w| {
            format!("width {w}")
        });
        if let Some([narrow, wide]) = e.asymmetry {
            let n = self
                .lab
                .model(&self.recipe(narrow, self.m.seed, DataVariant::Full)?)?;
            let w = self
                .lab
                .model(&self.recipe(wide, e.bottom_seed, DataVariant::Full)?)?;
            let down = self.curve("wide_to_narrow", &n, &w)?;
            let up = self.curve("narrow_to_wide", &w, &n)?;
            let mean =
                |c: &[PenaltyReport]| c.iter().map(|r| r.penalty).sum::<f64>() / c.len() as f64;
            let (md, mu) = (mean(&down), mean(&up));
            self.row("wide_to_narrow", None, "mean_penalty", md, e.bottom_seed);
            self.row("narrow_to_wide", None, "mean_penalty", mu, self.m.seed);
            self.check(
                "wide_into_narrow_is_easier",
                md < mu,
                format!(
                    "mean penalty {} (wide bottom) vs {} (narrow bottom)",
                    fmt_points(md),
                    fmt_points(mu)
                ),
            );
        }
        Ok(())
    }

    fn label_quality(&mut self, e: &LabelQuality) -> Result<()> {
        let depth = self.m.depth()?;
        let top = self.trained(self.m.seed)?;
        self.error_row("top", None, &top, self.m.seed)?;
        let mut variants: Vec<(String, DataVariant, bool)> = Vec::new();
        if e.coarse {
            variants.push(("coarse".into(), DataVariant::Coarse, false));
        }
        for &p in &e.noise {
            variants.push((
                format!("noise={p}"),
                DataVariant::Noisy {
                    p,
                    seed: e.noise_seed,
                },
                p >= 1.0,
            ));
        }
        for (name, data, pure_noise) in variants {
            let bottom = self
                .lab
                .model(&self.recipe(self.m.width, e.bottom_seed, data)?)?;
            let reports = self.curve(&name, &top, &bottom)?;
            if pure_noise {
                let deep = reports.last().expect("cuts are non-empty");
                self.check(
                    format!("{name}_fails_deep"),
                    deep.penalty >= e.pure_noise_min_penalty,
                    format!(
                        "cut {}: {} vs {}",
                        deep.cut,
                        fmt_points(deep.penalty),
                        fmt_points(e.pure_noise_min_penalty)
                    ),
                );
            } else {
                let shallow: Vec<&PenaltyReport> =
                    reports.iter().filter(|r| !is_deep(r.cut, depth)).collect();
                let worst = shallow.iter().map(|r| r.penalty).fold(f64::MIN, f64::max);
                self.check(
                    format!("{name}_connects_shallow"),
                    !shallow.is_empty() && worst <= e.shallow_max_penalty,
                    format!(
                        "max penalty over cuts {:?}: {} vs {}",
                        shallow.iter().map(|r| r.cut).collect::<Vec<_>>(),
                        fmt_points(worst),
                        fmt_points(e.shallow_max_penalty)
                    ),
                );
            }
        }
        Ok(())
    }

    fn kernel_ablation(&mut self, e: &KernelAblation) -> Result<()> {
        let top = self.trained(self.m.seed)?;
        let bottom = self.trained(e.bottom_seed)?;
        let cuts = self.m.cuts()?;
        let mut curves = Vec::new();
        for &k in &e.kernels {
            curves.push(self.curve_with(
                &format!("k={k}"),
                &top,
                &bottom,
                &cuts,
                StitchFamily::conv(k),
                None,
            )?);
        }
        let mut spreads = Vec::new();
        for (i, &cut) in cuts.iter().enumerate() {
            let values: Vec<f64> = curves.iter().map(|c| c[i].penalty).collect();
            let spread = values.iter().fold(f64::MIN, |a, &b| a.max(b))
                - values.iter().fold(f64::MAX, |a, &b| a.min(b));
            self.row("spread", Some(cut), "penalty_spread", spread, self.m.seed);
            spreads.push((cut, spread));
        }
        let worst = spreads.iter().map(|s| s.1).fold(f64::MIN, f64::max);
        self.check(
            "kernel_size_barely_matters",
            worst <= e.max_spread,
            spreads
                .iter()
                .map(|(c, s)| format!("cut {c}: {}", fmt_points(*s)))
                .collect::<Vec<_>>()
                .join(", ")
                + &format!(" vs {}", fmt_points(e.max_spread)),
        );
        Ok(())
    }

    fn finetune_baseline(&mut self, e: &FinetuneBaseline) -> Result<()> {
        let depth = self.m.depth()?;
        let base = self.recipe(self.m.width, self.m.seed, DataVariant::Full)?;
        let a = self.lab.model(&base)?;
        let baseline = self.error_row("baseline", None, &a, self.m.seed)?;
        let random = self.untrained_recipe(e.random_seed)?;
        let trained = self.recipe(self.m.width, e.bottom_seed, DataVariant::Full)?;
        let finetuned = |from: &Recipe, cut| Recipe {
            init: Init::From {
                base: Box::new(from.clone()),
                freeze_below: cut,
                reinit_seed: Some(e.reinit_seed),
            },
            ..base.clone()
        };
        let mut cuts = e.finetune_cuts.clone();
        cuts.sort_unstable();
        let mut gaps = Vec::new();
        for &cut in &cuts {
            let r = self.lab.model(&finetuned(&random, cut))?;
            let t = self.lab.model(&finetuned(&trained, cut))?;
            let er = self.error_row("finetune_random", Some(cut), &r, e.random_seed)?;
            let et = self.error_row("finetune_trained", Some(cut), &t, e.bottom_seed)?;
            self.row(
                "finetune_gap",
                Some(cut),
                "error_gap",
                er - et,
                e.random_seed,
            );
            gaps.push((cut, er - baseline));
        }
        let worst = gaps.iter().map(|g| g.1).fold(f64::MIN, f64::max);
        self.check(
            "finetune_on_random_bottom_recovers",
            worst <= e.max_finetune_gap,
            gaps.iter()
                .map(|(c, g)| format!("cut {c}: {}", fmt_points(*g)))
                .collect::<Vec<_>>()
                .join(", ")
                + &format!(" above baseline vs {}", fmt_points(e.max_finetune_gap)),
        );
        let r = self.lab.model(&random)?;
        let reports = self.curve("stitch_random", &a, &r)?;
        let deepest = reports.last().expect("cuts are non-empty");
        self.check(
            "stitching_random_bottom_fails_deep",
            is_deep(deepest.cut, depth) && deepest.penalty >= e.min_stitch_penalty,
            format!(
                "cut {}: {} vs {}",
                deepest.cut,
                fmt_points(deepest.penalty),
                fmt_points(e.min_stitch_penalty)
            ),
        );
        Ok(())
    }

    fn freeze_training(&mut self, e: &FreezeTraining) -> Result<()> {
        let a = self.trained(self.m.seed)?;
        let baseline = self.error_row("baseline", None, &a, self.m.seed)?;
        let small = self.recipe(
            self.m.width,
            e.bottom_seed,
            DataVariant::Subset {
                n: e.samples,
                seed: e.subset_seed,
            },
        )?;
        let s = self.lab.model(&small)?;
        self.error_row("small", None, &s, e.bottom_seed)?;
        let mut reports = self.curve("small_into_full", &a, &s)?;
        reports.sort_by_key(|r| r.cut);
        let frozen = reports
            .iter()
            .take_while(|r| r.penalty <= e.select_epsilon)
            .last()
            .map_or(0, |r| r.cut);
        self.row(
            "freeze",
            None,
            "frozen_blocks",
            frozen as f64,
            e.bottom_seed,
        );
        self.check(
            "some_blocks_qualify",
            frozen >= 1,
            format!(
                "{frozen} blocks within {} of the baseline",
                fmt_points(e.select_epsilon)
            ),
        );
        let recipe = Recipe {
            init: Init::From {
                base: Box::new(small),
                freeze_below: frozen,
                reinit_seed: None,
            },
            ..self.recipe(self.m.width, self.m.seed, DataVariant::Full)?
        };
        let f = self.lab.model(&recipe)?;
        let err = self.error_row("freeze", Some(frozen), &f, self.m.seed)?;
        self.check(
            "freeze_training_matches_baseline",
            err - baseline <= e.max_gap,
            format!(
                "error {} vs baseline {} (gap {} vs {})",
                fmt_points(err),
                fmt_points(baseline),
                fmt_points(err - baseline),
                fmt_points(e.max_gap)
            ),
        );
        Ok(())
    }

    fn cka_compare(&mut self, e: &CkaCompare) -> Result<()> {
        let a = self.trained(self.m.seed)?;
        let b = self.trained(e.bottom_seed)?;
        for &p in &e.poolings {
            let name = match p {
                Pooling::Pool => "pool",
                Pooling::Flatten => "flatten",
            };
            for (cut, v) in cka_curve(
                &a.model,
                &b.model,
                &self.lab.test,
                p,
                e.cka_examples,
                e.cka_seed,
            )? {
                self.row(name, Some(cut), "cka", v, e.cka_seed);
            }
        }
        self.curve("two_seed", &a, &b)?;
        let Some(k) = e.spurious else { return Ok(()) };
        let cut = self.m.depth()?;
        let test = &self.lab.test;
        let picked = subset(test, e.cka_examples.min(test.len()), e.cka_seed)?;
        let xa = extract_repr(&a.model, cut, &picked, Pooling::Pool, picked.len())?;
        let xb = extract_repr(&b.model, cut, &picked, Pooling::Pool, picked.len())?;
        let xb_aug = augment_spurious(&xb, k, e.spurious_seed);
        let plain = linear_cka(&xb, &xa)?;
        let augmented = linear_cka(&xb_aug, &xa)?;
        let own = linear_cka(&xb_aug, &xb)?;
        self.row("spurious", Some(cut), "cka_pair", plain, e.spurious_seed);
        self.row(
            "spurious",
            Some(cut),
            "cka_pair_augmented",
            augmented,
            e.spurious_seed,
        );
        self.row(
            "spurious",
            Some(cut),
            "cka_self_augmented",
            own,
            e.spurious_seed,
        );
        let family = self.m.stitch.family();
        let before = self.curve_with("spurious_plain", &a, &b, &[cut], family, None)?[0].penalty;
        let noise = Spurious {
            channels: k,
            seed: e.spurious_seed,
        };
        let after =
            self.curve_with("spurious_augmented", &a, &b, &[cut], family, Some(noise))?[0].penalty;
        self.check(
            "spurious_channels_lower_cka",
            plain - augmented >= e.min_cka_drop,
            format!(
                "{plain:.4} to {augmented:.4} with {k} noise columns vs drop {}",
                e.min_cka_drop
            ),
        );
        self.check(
            "spurious_channels_keep_penalty",
            (after - before).abs() <= e.max_penalty_change,
            format!(
                "penalty {} to {} vs {}",
                fmt_points(before),
                fmt_points(after),
                fmt_points(e.max_penalty_change)
            ),
        );
        Ok(())
    }
}
