use serde::{Deserialize, Serialize};

use super::loss::{ce_sum_and_grad, combine_unsup, pseudo_label, weighted_ce_sum_and_grad, PseudoLabel};
use super::VariantConfig;
use crate::augment::{apply_cutmix, cutmix_batch, strong_color, weak_augment, AugPipelineConfig, AugRecord};
use crate::error::{Error, Result};
use crate::featperturb::{FeaturePerturbSpec, FeatureNoise, PerturbKind, PerturbLocation};
use crate::model::{DecodeCache, Gradients, SegModel, TrunkCache};
use crate::par;
use crate::rng::SeedTree;
use crate::tensor::{ImageTensor, LabelMask, LogitMap, ProbabilityMap, Tensor3};
use crate::train::{ohem_keep_weights, OhemConfig};

/// Everything a single optimisation step needs besides the data.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepConfig {
    pub variant: VariantConfig,
    pub aug: AugPipelineConfig,
    pub fp: FeaturePerturbSpec,
    pub ohem: Option<OhemConfig>,
}

impl StepConfig {
    pub fn validate(&self) -> Result<()> {
        self.variant.validate()?;
        self.aug.validate()?;
        self.fp.validate()
    }
}

/// One strongly perturbed view with its (possibly mixed) target.
#[derive(Debug, Clone)]
pub struct StrongView {
    pub image: ImageTensor,
    pub target: LabelMask,
    /// Identity unless the variant perturbs features of strong views too.
    pub noise: FeatureNoise,
    pub record: AugRecord,
}

#[derive(Debug, Clone)]
pub struct UnlabeledPlan {
    pub weak: ImageTensor,
    pub weak_record: AugRecord,
    pub pseudo: PseudoLabel,
    /// Pseudo label as a target: ignore where invalid or padded.
    pub weak_target: LabelMask,
    /// One frozen perturbation per feature stream.
    pub feature_noise: Vec<FeatureNoise>,
    /// One view per image stream.
    pub strong: Vec<StrongView>,
    pub scored_pixels: usize,
}

/// All random draws and pseudo labels of one step, frozen.
#[derive(Debug, Clone)]
pub struct StepPlan {
    pub labeled: Vec<(ImageTensor, LabelMask)>,
    pub unlabeled: Vec<UnlabeledPlan>,
    pub location: PerturbLocation,
    pub mask_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub loss_s: f64,
    pub loss_u: f64,
    pub loss_total: f64,
    pub mask_ratio: f64,
    pub feature_losses: Vec<f64>,
    pub image_losses: Vec<f64>,
}

/// Logits of every stream, for tests and debugging.
#[derive(Debug, Clone, Default)]
pub struct StepTrace {
    pub labeled: Vec<LogitMap>,
    /// `[stream][sample]`
    pub feature: Vec<Vec<LogitMap>>,
    /// `[stream][sample]`
    pub image: Vec<Vec<LogitMap>>,
}

#[derive(Debug)]
pub struct StepOutput {
    pub losses: StepLosses,
    pub grads: Gradients,
    pub trace: Option<StepTrace>,
}

/// Draws views and perturbations and computes pseudo labels.
pub fn prepare_step(
    model: &SegModel,
    labeled: &[(ImageTensor, LabelMask)],
    unlabeled: &[ImageTensor],
    cfg: &StepConfig,
    seeds: &SeedTree,
) -> Result<StepPlan> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(Error::Argument("labeled batch is empty".into()));
    }
    let vc = &cfg.variant;
    if vc.uses_unlabeled() && unlabeled.is_empty() {
        return Err(Error::Argument("unlabeled batch is empty".into()));
    }
    let location = cfg.fp.location;

    let weak_l = seeds.stream("weak_l");
    let labeled = par::map_slice(labeled, |i, (img, mask)| {
        let (x, m, _) = weak_augment(img, Some(mask), &cfg.aug, &mut weak_l.child(i as u64).rng())?;
        Ok((x, m.expect("mask requested")))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    if !vc.uses_unlabeled() {
        return Ok(StepPlan {
            labeled,
            unlabeled: Vec::new(),
            location,
            mask_ratio: 0.0,
        });
    }

    let weak_u = seeds.stream("weak_u");
    let fp_seeds = seeds.stream("dropout");
    let strong_seeds = seeds.stream("strong");
    let hybrid_seeds = seeds.stream("hybrid_dropout");
    let hybrid = vc.variant.is_hybrid();
    let mut samples = par::map_slice(unlabeled, |i, img| -> Result<UnlabeledPlan> {
        let i64 = i as u64;
        let region_in = LabelMask::filled(img.height(), img.width(), 0);
        let (weak, region, weak_record) = weak_augment(img, Some(&region_in), &cfg.aug, &mut weak_u.child(i64).rng())?;
        let region = region.expect("region requested");
        let (h, w) = (weak.height(), weak.width());
        let trunk = model.trunk(&weak, location)?;
        let logits = model.head(&trunk, location, h, w)?;
        let mut pseudo = pseudo_label(&ProbabilityMap::from_logits(&logits), vc.tau)?;
        pseudo.restrict_to(&region);
        let weak_target = pseudo.to_target();
        let head = model.head_decoder(location, h, w);
        let feature_noise = (0..vc.n_feature_streams)
            .map(|f| FeatureNoise::sample(&cfg.fp, &trunk, &head, &mut fp_seeds.child(f as u64).child(i64).rng()))
            .collect::<Result<Vec<_>>>()?;
        let strong = (0..vc.n_image_streams)
            .map(|j| -> Result<StrongView> {
                let (image, color) = if cfg.aug.strong {
                    strong_color(&weak, &cfg.aug, &mut strong_seeds.child(j as u64).child(i64).rng())?
                } else {
                    (weak.clone(), AugRecord::identity(h, w))
                };
                let noise = if hybrid {
                    let mut rng = hybrid_seeds.child(j as u64).child(i64).rng();
                    if cfg.fp.kind == PerturbKind::Vat {
                        let t = model.trunk(&image, location)?;
                        FeatureNoise::sample(&cfg.fp, &t, &head, &mut rng)?
                    } else {
                        FeatureNoise::sample(&cfg.fp, &trunk, &head, &mut rng)?
                    }
                } else {
                    FeatureNoise::Identity
                };
                let record = AugRecord {
                    color_ops: color.color_ops,
                    ..weak_record.clone()
                };
                Ok(StrongView {
                    image,
                    target: weak_target.clone(),
                    noise,
                    record,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(UnlabeledPlan {
            weak,
            weak_record,
            pseudo,
            weak_target,
            feature_noise,
            strong,
            scored_pixels: region.count_scored(),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    if cfg.aug.strong && cfg.aug.cutmix_prob > 0.0 {
        let cutmix_seeds = seeds.stream("cutmix");
        for j in 0..vc.n_image_streams {
            let images: Vec<ImageTensor> = samples.iter().map(|s| s.strong[j].image.clone()).collect();
            let targets: Vec<LabelMask> = samples.iter().map(|s| s.strong[j].target.clone()).collect();
            let (_, _, recs) = cutmix_batch(
                &images,
                &targets,
                cfg.aug.cutmix_prob,
                cfg.aug.cutmix_area,
                &mut cutmix_seeds.child(j as u64).rng(),
            )?;
            let (mixed_i, mixed_t) = apply_cutmix(&images, &targets, &recs)?;
            for (((s, img), tgt), rec) in samples.iter_mut().zip(mixed_i).zip(mixed_t).zip(recs) {
                let view = &mut s.strong[j];
                view.image = img;
                view.target = tgt;
                view.record.cutmix_box = rec.cutmix_box;
                view.record.cutmix_partner = rec.cutmix_partner;
                view.record.cutmix_skipped = rec.cutmix_skipped;
            }
        }
    }

    let valid: usize = samples.iter().map(|s| s.pseudo.num_valid()).sum();
    let scored: usize = samples.iter().map(|s| s.scored_pixels).sum();
    let mask_ratio = if scored == 0 { 0.0 } else { valid as f64 / scored as f64 };
    Ok(StepPlan {
        labeled,
        unlabeled: samples,
        location,
        mask_ratio,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stream {
    Supervised,
    Feature(usize),
    Image(usize),
}

struct HeadJob<'a> {
    noise: &'a FeatureNoise,
    target: &'a LabelMask,
    stream: Stream,
}

/// One trunk pass shared by one or more heads.
struct Job<'a> {
    image: &'a ImageTensor,
    location: PerturbLocation,
    heads: Vec<HeadJob<'a>>,
}

struct JobForward {
    trunk: TrunkCache,
    heads: Vec<(LogitMap, DecodeCache)>,
}

static IDENTITY: FeatureNoise = FeatureNoise::Identity;

fn build_jobs<'a>(plan: &'a StepPlan) -> Vec<Job<'a>> {
    let mut jobs = Vec::new();
    for (img, mask) in &plan.labeled {
        jobs.push(Job {
            image: img,
            location: PerturbLocation::EncoderDecoder,
            heads: vec![HeadJob {
                noise: &IDENTITY,
                target: mask,
                stream: Stream::Supervised,
            }],
        });
    }
    for s in &plan.unlabeled {
        if !s.feature_noise.is_empty() {
            jobs.push(Job {
                image: &s.weak,
                location: plan.location,
                heads: s
                    .feature_noise
                    .iter()
                    .enumerate()
                    .map(|(f, noise)| HeadJob {
                        noise,
                        target: &s.weak_target,
                        stream: Stream::Feature(f),
                    })
                    .collect(),
            });
        }
        for (j, v) in s.strong.iter().enumerate() {
            jobs.push(Job {
                image: &v.image,
                location: plan.location,
                heads: vec![HeadJob {
                    noise: &v.noise,
                    target: &v.target,
                    stream: Stream::Image(j),
                }],
            });
        }
    }
    jobs
}

/// Loss and parameter gradient of `½(L_s + L_u)` for a frozen plan.
pub fn plan_loss_and_grad(model: &SegModel, plan: &StepPlan, cfg: &StepConfig, trace: bool) -> Result<StepOutput> {
    let vc = &cfg.variant;
    let n_feat = plan.unlabeled.first().map_or(0, |s| s.feature_noise.len());
    let n_img = plan.unlabeled.first().map_or(0, |s| s.strong.len());
    let jobs = build_jobs(plan);

    let forwards = par::map_slice(&jobs, |_, job| -> Result<JobForward> {
        let (trunk_out, trunk) = model.trunk_cached(job.image, job.location)?;
        let (h, w) = (job.image.height(), job.image.width());
        let heads = job
            .heads
            .iter()
            .map(|hj| model.head_cached(&hj.noise.apply(&trunk_out)?, job.location, h, w))
            .collect::<Result<Vec<_>>>()?;
        Ok(JobForward { trunk, heads })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    // Optional OHEM weights for the supervised heads, chosen over the whole batch.
    let ohem_weights = match &cfg.ohem {
        Some(o) => {
            let sup: Vec<(&LogitMap, &LabelMask)> = jobs
                .iter()
                .zip(&forwards)
                .filter(|(j, _)| j.heads[0].stream == Stream::Supervised)
                .map(|(j, f)| (&f.heads[0].0, j.heads[0].target))
                .collect();
            Some(ohem_keep_weights(&sup, o)?)
        }
        None => None,
    };

    // Per-head CE sums and gradients of the sums.
    let mut sup_index = 0;
    let head_terms: Vec<Vec<(f64, usize, LogitMap)>> = jobs
        .iter()
        .zip(&forwards)
        .map(|(job, fwd)| {
            job.heads
                .iter()
                .zip(&fwd.heads)
                .map(|(hj, (logits, _))| match (&ohem_weights, hj.stream) {
                    (Some(weights), Stream::Supervised) => {
                        let r = weighted_ce_sum_and_grad(logits, hj.target, &weights[sup_index], 1.0);
                        sup_index += 1;
                        r
                    }
                    _ => ce_sum_and_grad(logits, hj.target, 1.0),
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut sums_s = (0.0, 0usize);
    let mut sums_f = vec![(0.0, 0usize); n_feat];
    let mut sums_i = vec![(0.0, 0usize); n_img];
    for (job, terms) in jobs.iter().zip(&head_terms) {
        for (hj, (sum, count, _)) in job.heads.iter().zip(terms) {
            let slot = match hj.stream {
                Stream::Supervised => &mut sums_s,
                Stream::Feature(f) => &mut sums_f[f],
                Stream::Image(j) => &mut sums_i[j],
            };
            slot.0 += sum;
            slot.1 += count;
        }
    }
    let mean = |(s, c): (f64, usize)| if c == 0 { 0.0 } else { s / c as f64 };
    let loss_s = mean(sums_s);
    let feature_losses: Vec<f64> = sums_f.iter().copied().map(mean).collect();
    let image_losses: Vec<f64> = sums_i.iter().copied().map(mean).collect();
    if !loss_s.is_finite() {
        return Err(Error::non_finite("supervised stream"));
    }
    for (f, l) in feature_losses.iter().enumerate() {
        if !l.is_finite() {
            return Err(Error::non_finite(format!("feature stream {f}")));
        }
    }
    for (j, l) in image_losses.iter().enumerate() {
        if !l.is_finite() {
            return Err(Error::non_finite(format!("image stream {j}")));
        }
    }
    let loss_u = if vc.uses_unlabeled() {
        combine_unsup(&feature_losses, &image_losses, vc.lambda, vc.mu)?
    } else {
        0.0
    };
    let loss_total = 0.5 * (loss_s + loss_u);

    // dL_total / d(sum of CE in stream)
    let coef = |stream: Stream| -> f64 {
        let per_mean = |c: usize| if c == 0 { 0.0 } else { 1.0 / c as f64 };
        match stream {
            Stream::Supervised => 0.5 * per_mean(sums_s.1),
            Stream::Feature(f) => 0.5 * vc.lambda / n_feat as f64 * per_mean(sums_f[f].1),
            Stream::Image(j) => 0.5 * vc.mu / n_img as f64 * per_mean(sums_i[j].1),
        }
    };

    let job_grads = par::map_range(jobs.len(), |k| {
        let (job, fwd, terms) = (&jobs[k], &forwards[k], &head_terms[k]);
        let mut grads = Gradients::zeros_like(model);
        let mut g_trunk: Option<Tensor3> = None;
        for ((hj, (_, cache)), (_, _, g_sum)) in job.heads.iter().zip(&fwd.heads).zip(terms) {
            let mut g = g_sum.clone();
            g.scale(coef(hj.stream));
            let g_in = hj.noise.backward(model.head_backward(cache, job.location, &g, &mut grads));
            match g_trunk.as_mut() {
                Some(acc) => acc.add_assign(&g_in),
                None => g_trunk = Some(g_in),
            }
        }
        if let Some(g) = g_trunk {
            model.trunk_backward(&fwd.trunk, job.location, g, &mut grads);
        }
        grads
    });
    let mut grads = Gradients::zeros_like(model);
    for g in &job_grads {
        grads.add_assign(g);
    }
    if !grads.is_finite() {
        return Err(Error::non_finite("parameter gradient"));
    }

    let trace = trace.then(|| {
        let mut t = StepTrace {
            labeled: Vec::new(),
            feature: vec![Vec::new(); n_feat],
            image: vec![Vec::new(); n_img],
        };
        for (job, fwd) in jobs.iter().zip(&forwards) {
            for (hj, (logits, _)) in job.heads.iter().zip(&fwd.heads) {
                match hj.stream {
                    Stream::Supervised => t.labeled.push(logits.clone()),
                    Stream::Feature(f) => t.feature[f].push(logits.clone()),
                    Stream::Image(j) => t.image[j].push(logits.clone()),
                }
            }
        }
        t
    });

    Ok(StepOutput {
        losses: StepLosses {
            loss_s,
            loss_u,
            loss_total,
            mask_ratio: plan.mask_ratio,
            feature_losses,
            image_losses,
        },
        grads,
        trace,
    })
}

/// Prepares and evaluates one step; the caller applies the gradient.
pub fn train_step(
    model: &SegModel,
    labeled: &[(ImageTensor, LabelMask)],
    unlabeled: &[ImageTensor],
    cfg: &StepConfig,
    seeds: &SeedTree,
) -> Result<StepOutput> {
    let plan = prepare_step(model, labeled, unlabeled, cfg, seeds)?;
    plan_loss_and_grad(model, &plan, cfg, false)
}
