//! Subcommand bodies. Each is a pure function of its inputs, the config and
//! the seed.

use std::path::{Path, PathBuf};

use dvt_core::config::RunConfig;
use dvt_core::evaluation::{
    ablation_variants, build_memory_bank, feature_position_mic, kmeans, knn_segment, miou, norm_prominence, similarity_map,
};
use dvt_core::field_models::FieldModels;
use dvt_core::interchange::{read_dvtf, write_dvtf, write_view_plan, Record};
use dvt_core::stage1::{format_metrics, run_stage1};
use dvt_core::stage2::{apply_denoiser, mean_patch_cosine, train_denoiser, DenoiserModel};
use dvt_core::synthetic::{centered_cosine, generate, generate_labeled};
use dvt_core::view_sampler::sample_plan;
use dvt_core::viz::{pca_rgb, render_labels, render_scalar_map, write_image, Colormap};
use dvt_core::{Error, FeatureMap, LabelMap, ViewSet, ViewTransform};

use crate::log::{emit, f};
use crate::{Cli, Command, EvalCommand, Failure, VizCommand};

type Outcome = Result<(), Failure>;

pub fn run(cli: &Cli, cfg: &RunConfig) -> Outcome {
    match &cli.command {
        Command::Synth(a) => synth(cfg, &a.out, a.labeled),
        Command::PlanViews(a) => plan_views(cfg, &a.out, (a.height, a.width)),
        Command::Denoise(a) => denoise(cfg, &a.views, &a.out, a.truth.as_deref()),
        Command::TrainDenoiser(a) => train(cfg, &a.raw, &a.clean, &a.out),
        Command::Apply(a) => apply(&a.model, &a.input, &a.out),
        Command::Eval(EvalCommand::Mic(a)) => eval_mic(cfg, &a.input),
        Command::Eval(EvalCommand::Knn(a)) => eval_knn(cfg, a),
        Command::Eval(EvalCommand::Ablation(a)) => eval_ablation(cfg, &a.model, &a.raw, &a.out),
        Command::Viz(v) => viz(cfg, v),
        Command::ShowConfig => {
            print!("{}", cfg.render());
            Ok(())
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|source| Failure::from(Error::Io { path: dir.into(), source }))
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

fn write(record: Record, path: &Path) -> Outcome {
    write_dvtf(&record, path)?;
    emit(&[("wrote", show(path)), ("kind", record.kind_name().into())]);
    Ok(())
}

/// The identity view of a ViewSet: the whole image, unflipped.
fn identity_view(vs: &ViewSet) -> Option<&FeatureMap> {
    vs.views
        .iter()
        .find(|(t, _)| *t == ViewTransform::identity(t.out_grid))
        .map(|(_, m)| m)
}

/// A FeatureMap file, or the identity view of a ViewSet file.
fn read_features(path: &Path) -> Result<FeatureMap, Failure> {
    match read_dvtf(path)? {
        Record::FeatureMap(m) => Ok(m),
        Record::ViewSet(vs) => identity_view(&vs).cloned().ok_or_else(|| {
            Failure::from(Error::Contract {
                op: "read_features",
                msg: format!("{} holds no identity view", path.display()),
            })
        }),
        other => Err(Error::Format(format!("{}: expected FeatureMap or ViewSet, found {}", path.display(), other.kind_name())).into()),
    }
}

fn read_labels(path: &Path) -> Result<LabelMap, Failure> {
    Ok(read_dvtf(path)?.into_label_map()?)
}

fn synth(cfg: &RunConfig, out: &Path, labeled: bool) -> Outcome {
    ensure_dir(out)?;
    let spec = &cfg.synth;
    let (views, truth, labels) = if labeled {
        let (v, t, l) = generate_labeled(spec, cfg.eval.n_classes)?;
        (v, t, Some(l))
    } else {
        let (v, t) = generate(spec)?;
        (v, t, None)
    };
    emit(&[
        ("cmd", "synth".into()),
        ("seed", spec.seed.to_string()),
        ("views", views.views.len().to_string()),
        ("channels", spec.channels.to_string()),
        ("k", spec.k.to_string()),
        ("labeled", labeled.to_string()),
    ]);
    write(Record::ViewSet(views), &out.join("views.dvtf"))?;
    write(Record::FeatureMap(truth.semantics), &out.join("truth_clean.dvtf"))?;
    write(Record::FeatureMap(truth.artifact), &out.join("truth_artifact.dvtf"))?;
    if let Some(l) = labels {
        write(Record::LabelMap(l), &out.join("labels.dvtf"))?;
    }
    Ok(())
}

fn plan_views(cfg: &RunConfig, out: &Path, size: (u32, u32)) -> Outcome {
    let plan = sample_plan(&cfg.sampler)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    write_view_plan(&plan, size, out)?;
    emit(&[
        ("cmd", "plan-views".into()),
        ("seed", cfg.sampler.seed.to_string()),
        ("views", plan.len().to_string()),
        ("wrote", show(out)),
    ]);
    Ok(())
}

fn denoise(cfg: &RunConfig, views: &Path, out: &Path, truth: Option<&Path>) -> Outcome {
    let vs = read_dvtf(views)?.into_view_set()?;
    ensure_dir(out)?;
    emit(&[
        ("cmd", "denoise".into()),
        ("image", vs.image_id.clone()),
        ("views", vs.views.len().to_string()),
        ("iterations", cfg.stage1.total_iters.to_string()),
        ("seed", cfg.stage1.seed.to_string()),
    ]);
    let r = run_stage1(&vs, &cfg.stage1)?;
    let stride = (r.metrics.len() / 10).max(1);
    for m in r.metrics.iter().filter(|m| (m.iteration + 1) % stride == 0) {
        emit(&[
            ("iteration", (m.iteration + 1).to_string()),
            ("l_distance", f(m.l_distance)),
            ("l_residual", f(m.l_residual)),
            ("l_sparsity", f(m.l_sparsity)),
        ]);
    }
    let mic = |m: &FeatureMap| feature_position_mic(m, &cfg.mic).map(|p| p.score);
    emit(&[
        ("mic_clean", f(mic(&r.clean)?)),
        ("mic_artifact", f(mic(&r.artifact)?)),
        ("residual_norm_mean", f(r.residual_norm_stats.mean)),
        ("residual_norm_max", f(r.residual_norm_stats.max)),
    ]);
    if let Some(dir) = truth {
        let clean = read_features(&dir.join("truth_clean.dvtf"))?;
        let artifact = read_features(&dir.join("truth_artifact.dvtf"))?;
        emit(&[
            ("recovery_semantics", f(centered_cosine(&r.clean, &clean)?)),
            ("recovery_artifact", f(centered_cosine(&r.artifact, &artifact)?)),
        ]);
    }
    let metrics_path = out.join("metrics.csv");
    std::fs::write(&metrics_path, format_metrics(&r.metrics)).map_err(|source| Failure::from(Error::Io { path: metrics_path.clone(), source }))?;
    emit(&[("wrote", show(&metrics_path)), ("kind", "csv".into())]);
    write(Record::FeatureMap(r.clean), &out.join("clean.dvtf"))?;
    write(Record::FeatureMap(r.artifact), &out.join("artifact.dvtf"))?;
    write(Record::Checkpoint(r.models.to_checkpoint()), &out.join("checkpoint.dvtf"))?;
    Ok(())
}

fn train(cfg: &RunConfig, raw: &[PathBuf], clean: &[PathBuf], out: &Path) -> Outcome {
    if raw.len() != clean.len() {
        return Err(Failure::usage(format!("{} --raw inputs but {} --clean inputs", raw.len(), clean.len())));
    }
    let pairs = raw
        .iter()
        .zip(clean)
        .map(|(r, c)| Ok((read_features(r)?, read_features(c)?)))
        .collect::<Result<Vec<_>, Failure>>()?;
    emit(&[
        ("cmd", "train-denoiser".into()),
        ("pairs", pairs.len().to_string()),
        ("epochs", cfg.stage2.epochs.to_string()),
        ("seed", cfg.stage2.seed.to_string()),
    ]);
    let t = train_denoiser(&pairs, &cfg.stage2)?;
    for (e, l) in t.epoch_losses.iter().enumerate() {
        emit(&[("epoch", (e + 1).to_string()), ("loss", f(*l))]);
    }
    let cos = pairs
        .iter()
        .map(|(y, c)| mean_patch_cosine(&apply_denoiser(&t.model, y)?, c))
        .sum::<dvt_core::Result<f64>>()?
        / pairs.len() as f64;
    emit(&[
        ("train_cosine", f(cos)),
        ("params", t.model.param_count().to_string()),
        ("heads", t.model.num_heads.to_string()),
    ]);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    write(Record::Checkpoint(t.model.to_checkpoint()), out)
}

fn apply(model: &Path, input: &Path, out: &Path) -> Outcome {
    let model = DenoiserModel::from_checkpoint(&read_dvtf(model)?.into_checkpoint()?)?;
    let record = match read_dvtf(input)? {
        Record::FeatureMap(m) => Record::FeatureMap(apply_denoiser(&model, &m)?),
        Record::ViewSet(mut vs) => {
            for (_, m) in &mut vs.views {
                *m = apply_denoiser(&model, m)?;
            }
            Record::ViewSet(vs)
        }
        other => {
            return Err(Error::Format(format!("{}: cannot denoise a {}", input.display(), other.kind_name())).into());
        }
    };
    emit(&[("cmd", "apply".into()), ("input", show(input))]);
    write(record, out)
}

fn eval_mic(cfg: &RunConfig, inputs: &[PathBuf]) -> Outcome {
    for p in inputs {
        let m = read_features(p)?;
        let s = feature_position_mic(&m, &cfg.mic)?;
        emit(&[
            ("input", show(p)),
            ("mic", f(s.score)),
            ("mic_x", f(s.max_x)),
            ("mic_y", f(s.max_y)),
        ]);
    }
    Ok(())
}

fn eval_knn(cfg: &RunConfig, a: &crate::KnnArgs) -> Outcome {
    if a.train_features.len() != a.train_labels.len() || a.test_features.len() != a.test_labels.len() {
        return Err(Failure::usage("each feature file needs exactly one label file"));
    }
    let bank_pairs = a
        .train_features
        .iter()
        .zip(&a.train_labels)
        .map(|(fp, lp)| Ok((read_features(fp)?, read_labels(lp)?)))
        .collect::<Result<Vec<_>, Failure>>()?;
    let bank = build_memory_bank(&bank_pairs, cfg.eval.metric)?;
    let mut total = 0.0;
    for (fp, lp) in a.test_features.iter().zip(&a.test_labels) {
        let (feats, gt) = (read_features(fp)?, read_labels(lp)?);
        let pred = knn_segment(&bank, &feats, cfg.eval.knn_k)?;
        let r = miou(&pred, &gt, cfg.eval.n_classes)?;
        emit(&[("input", show(fp)), ("miou", f(r.miou))]);
        total += r.miou;
    }
    emit(&[
        ("cmd", "eval-knn".into()),
        ("bank_entries", bank.entries.len().to_string()),
        ("k", cfg.eval.knn_k.to_string()),
        ("mean_miou", f(total / a.test_features.len() as f64)),
    ]);
    Ok(())
}

fn eval_ablation(cfg: &RunConfig, model: &Path, raw: &Path, out: &Path) -> Outcome {
    let models = FieldModels::from_checkpoint(&read_dvtf(model)?.into_checkpoint()?)?;
    let y = read_features(raw)?;
    let v = ablation_variants(&models, &y)?;
    ensure_dir(out)?;
    emit(&[("cmd", "eval-ablation".into()), ("mic_raw", f(feature_position_mic(&y, &cfg.mic)?.score))]);
    for (name, m) in [("f", v.f), ("f_g", v.f_g), ("f_g_residual", v.f_g_residual)] {
        emit(&[
            ("variant", name.into()),
            ("mic", f(feature_position_mic(&m, &cfg.mic)?.score)),
            ("cosine_to_raw", f(mean_patch_cosine(&m, &y)?)),
        ]);
        write(Record::FeatureMap(m), &out.join(format!("{name}.dvtf")))?;
    }
    Ok(())
}

fn parse_anchor(s: &str, m: &FeatureMap) -> Result<(usize, usize), Failure> {
    if s.is_empty() {
        return Ok((m.grid_h / 2, m.grid_w / 2));
    }
    let bad = || Failure::usage(format!("--anchor expects ROW,COL, got {s:?}"));
    let (i, j) = s.split_once(',').ok_or_else(bad)?;
    Ok((i.trim().parse().map_err(|_| bad())?, j.trim().parse().map_err(|_| bad())?))
}

fn viz(cfg: &RunConfig, cmd: &VizCommand) -> Outcome {
    let scale = cfg.eval.viz_scale;
    let (name, io) = match cmd {
        VizCommand::Pca(a) => ("pca", a),
        VizCommand::Norm(a) => ("norm", a),
        VizCommand::Clusters(a) => ("clusters", a),
        VizCommand::Similarity(a) => ("similarity", &a.io),
    };
    let m = read_features(&io.input)?;
    let img = match cmd {
        VizCommand::Pca(_) => pca_rgb(&m, scale)?,
        VizCommand::Norm(_) => render_scalar_map(&norm_prominence(&m), Colormap::Viridis, scale)?,
        VizCommand::Clusters(_) => {
            let r = kmeans(&m, cfg.eval.kmeans_k, cfg.stage1.seed, cfg.eval.kmeans_iters)?;
            emit(&[("kmeans_cost", f(r.cost())), ("kmeans_iterations", r.iterations.to_string())]);
            render_labels(&r.labels, scale)?
        }
        VizCommand::Similarity(a) => {
            let anchor = parse_anchor(&a.anchor, &m)?;
            emit(&[("anchor", format!("{},{}", anchor.0, anchor.1))]);
            render_scalar_map(&similarity_map(&m, anchor)?, Colormap::Viridis, scale)?
        }
    };
    if let Some(dir) = io.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    write_image(&img, &io.out)?;
    emit(&[
        ("cmd", format!("viz-{name}")),
        ("wrote", show(&io.out)),
        ("width", img.w.to_string()),
        ("height", img.h.to_string()),
    ]);
    Ok(())
}
