use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use vda_core::ablation::{run_ablation, train_models};
use vda_core::baselines::{coral_transform, fit_stats, pca_transform};
use vda_core::data_io::{
    self, generate_toy, load_images, load_pairs, load_pgm, load_video_truth, load_videos,
    read_jsonl, save_features, save_pgm, FeatureMatrix, ToyCorpus, ToyGenConfig, VideoRow,
};
use vda_core::degrade::{self, DegradationSpec};
use vda_core::evaluation::{describe_videos, evaluate, FrameCount, Protocol};
use vda_core::fusion::{frame_features, rank_frames, FusionMode, VideoFeatureSet};
use vda_core::models::{
    build_rfnet, infer_discriminator_config, load_discriminator, load_vdnet, Network, NetworkConfig,
};
use vda_core::trainer::{pretrain_rfnet, train, Model, PretrainConfig, TrainConfig};
use vda_core::ParamStore;

use crate::manifest::{self, write_atomic, Recorder};
use crate::{
    AblationArgs, BaselineArgs, Command, DegradeArgs, EmbedArgs, EvalArgs, FusionArg, GenToyArgs,
    MethodArg, PretrainArgs, ProtocolArg, RankFramesArgs, TrainArgs, UsageError,
};

pub fn run(cmd: Command, argv: Vec<String>) -> Result<()> {
    let name = argv.get(1).cloned().unwrap_or_default();
    let mut rec = Recorder::start(&name, argv);
    let manifest_path = match cmd {
        Command::GenToy(a) => gen_toy(a, &mut rec)?,
        Command::Pretrain(a) => pretrain(a, &mut rec)?,
        Command::Train(a) => train_cmd(a, &mut rec)?,
        Command::Eval(a) => eval(a, &mut rec)?,
        Command::RankFrames(a) => rank(a, &mut rec)?,
        Command::Degrade(a) => degrade_cmd(a, &mut rec)?,
        Command::Baseline(a) => baseline(a, &mut rec)?,
        Command::Embed(a) => embed(a, &mut rec)?,
        Command::Ablation(a) => ablation(a, &mut rec)?,
    };
    rec.finish(&manifest_path)
}

/// A JSON argument: an inline object, or a path to a file holding one.
fn json_arg(arg: &str) -> Result<Value> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        std::fs::read_to_string(arg).with_context(|| format!("reading {arg}"))?
    };
    serde_json::from_str(&text).with_context(|| format!("parsing {arg}"))
}

fn from_json<T: DeserializeOwned>(v: Value, what: &str) -> Result<T> {
    serde_json::from_value(v).with_context(|| format!("invalid {what}"))
}

fn to_json<T: Serialize>(v: &T) -> Result<Value> {
    Ok(serde_json::to_value(v)?)
}

fn network_config(arg: &str) -> Result<NetworkConfig> {
    let cfg = match arg {
        "toy" => NetworkConfig::toy(),
        "full" => NetworkConfig::full(),
        path => from_json(json_arg(path)?, "network config")?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => {
            std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
        }
        _ => Ok(()),
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    ensure_parent(path)?;
    write_atomic(path, (serde_json::to_string_pretty(v)? + "\n").as_bytes())
}

fn gen_toy(a: GenToyArgs, rec: &mut Recorder) -> Result<PathBuf> {
    let mut cfg: ToyGenConfig =
        with_defaults(&ToyGenConfig::default(), a.config.as_deref(), "toy config")?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    rec.config(to_json(&cfg)?, Some(cfg.seed));
    generate_toy(&cfg)?.write(&a.out)?;
    rec.output(&a.out);
    Ok(manifest::for_dir(&a.out))
}

fn pretrain(a: PretrainArgs, rec: &mut Recorder) -> Result<PathBuf> {
    let mut cfg: PretrainConfig = with_defaults(
        &PretrainConfig::toy(),
        a.config.as_deref(),
        "pretraining config",
    )?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    rec.config(to_json(&cfg)?, Some(cfg.seed));
    let images = load_images(&a.images)?;
    let net = pretrain_rfnet(&images, &cfg)?;
    ensure_parent(&a.out)?;
    net.params().save(&a.out)?;
    rec.output(&a.out);
    Ok(manifest::for_file(&a.out))
}

/// Merges `patch` into `base`, recursing into objects.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `defaults` with the fields of the optional JSON argument laid over it.
fn with_defaults<T: Serialize + DeserializeOwned>(
    defaults: &T,
    arg: Option<&str>,
    what: &str,
) -> Result<T> {
    let mut v = to_json(defaults)?;
    if let Some(a) = arg {
        merge(&mut v, json_arg(a)?);
    }
    from_json(v, what)
}

/// A full training config, or `{"preset": "<model>", ...overrides}`.
pub fn resolve_train_config(raw: Value) -> Result<TrainConfig> {
    let mut raw = raw;
    let preset = raw.as_object_mut().and_then(|m| m.remove("preset"));
    let value = match preset {
        Some(Value::String(p)) => {
            let model = Model::parse(&p)
                .ok_or_else(|| anyhow!("unknown preset {p:?}; expected one of A to F"))?;
            let mut base = to_json(&TrainConfig::preset(model))?;
            merge(&mut base, raw);
            base
        }
        Some(other) => return Err(anyhow!("preset must be a string, got {other}")),
        None => raw,
    };
    let cfg: TrainConfig = from_json(value, "training config")?;
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(a: TrainArgs, rec: &mut Recorder) -> Result<PathBuf> {
    let mut cfg = resolve_train_config(json_arg(&a.config)?)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    rec.config(to_json(&cfg)?, Some(cfg.seed));
    let net_cfg = network_config(&a.network.network)?;
    let rfnet = build_rfnet(&net_cfg, &ParamStore::load(&a.rfnet)?)?;
    let images = load_images(&a.images)?;
    let videos = load_videos(&a.videos)?;
    let out = train(&cfg, &rfnet, &images, &videos)?;

    std::fs::create_dir_all(&a.out)?;
    let history = a.out.join("history.jsonl");
    out.history.save(&history)?;
    let vdnet = a.out.join("vdnet.ckpt");
    out.vdnet.params().save(&vdnet)?;
    let config = a.out.join("config.json");
    write_json(&config, &cfg)?;
    for p in [&history, &vdnet, &config] {
        rec.output(p);
    }
    if let Some(d) = &out.discriminator {
        let disc = a.out.join("disc.ckpt");
        d.params().save(&disc)?;
        rec.output(&disc);
    }
    Ok(manifest::for_dir(&a.out))
}

fn load_embedder(network: &str, ckpt: &Path) -> Result<Network> {
    let cfg = network_config(network)?;
    let store = ParamStore::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    Ok(load_vdnet(&cfg, &store)?)
}

fn load_disc(ckpt: &Path) -> Result<Network> {
    let store = ParamStore::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    Ok(load_discriminator(
        &infer_discriminator_config(&store)?,
        &store,
    )?)
}

fn eval(a: EvalArgs, rec: &mut Recorder) -> Result<PathBuf> {
    let protocol = match a.protocol {
        ProtocolArg::Verification => Protocol::Verification,
        ProtocolArg::Set => Protocol::Set,
    };
    let fusion = match a.fusion {
        FusionArg::Uniform => FusionMode::Uniform,
        FusionArg::Weighted => FusionMode::Weighted,
    };
    if fusion == FusionMode::Weighted && a.ckpt.len() < 2 {
        return Err(UsageError(
            "weighted fusion needs a discriminator: --ckpt <VDNET> <DISC>".into(),
        )
        .into());
    }
    if protocol == Protocol::Set && a.truth.is_none() {
        return Err(UsageError("the set protocol needs --truth <sidecar>".into()).into());
    }
    rec.config(
        serde_json::json!({
            "protocol": protocol,
            "frames": a.frames,
            "fusion": fusion,
            "network": a.network.network,
        }),
        Some(a.seed),
    );
    let net = load_embedder(&a.network.network, &a.ckpt[0])?;
    let disc = a.ckpt.get(1).map(|p| load_disc(p)).transpose()?;
    let videos = load_videos(&a.videos)?;
    let pairs = load_pairs(&a.pairs)?;
    let truth = a.truth.as_deref().map(load_video_truth).transpose()?;
    let sets = describe_videos(&net, disc.as_ref(), &videos)?;
    let report = evaluate(
        &sets,
        &pairs,
        truth.as_deref(),
        protocol,
        a.frames,
        fusion,
        a.seed,
    )?;
    write_json(&a.out, &report)?;
    rec.output(&a.out);
    Ok(manifest::for_file(&a.out))
}

fn rank(a: RankFramesArgs, rec: &mut Recorder) -> Result<PathBuf> {
    let rows: Vec<VideoRow> = read_jsonl(&a.video)?;
    let row = match &a.video_id {
        Some(id) => rows
            .iter()
            .find(|r| &r.video_id == id)
            .ok_or_else(|| anyhow!("video {id} is not in {}", a.video.display()))?,
        None => rows
            .first()
            .ok_or_else(|| anyhow!("{} lists no videos", a.video.display()))?,
    };
    rec.config(
        serde_json::json!({"video_id": row.video_id, "network": a.network.network}),
        None,
    );
    let dir = a.video.parent().map(Path::to_path_buf).unwrap_or_default();
    let frames = row
        .frames
        .iter()
        .map(|f| load_pgm(&dir.join(f)))
        .collect::<vda_core::Result<Vec<_>>>()?;
    let net = load_embedder(&a.network.network, &a.ckpt[0])?;
    let disc = load_disc(&a.ckpt[1])?;
    let set = VideoFeatureSet::extract(row.video_id.clone(), &net, Some(&disc), &frames)?;
    let mut text = String::new();
    for r in rank_frames(&set.weights) {
        text.push_str(&format!(
            "{{\"frame\":{},\"weight\":{:.4}}}\n",
            r.frame, r.weight
        ));
    }
    ensure_parent(&a.out)?;
    write_atomic(&a.out, text.as_bytes())?;
    rec.output(&a.out);
    Ok(manifest::for_file(&a.out))
}

fn degrade_cmd(a: DegradeArgs, rec: &mut Recorder) -> Result<PathBuf> {
    let spec: DegradationSpec = match &a.spec {
        Some(s) => from_json(json_arg(s)?, "degradation spec")?,
        None => degrade::sample_spec(&mut ChaCha8Rng::seed_from_u64(a.seed)),
    };
    rec.config(serde_json::json!({ "spec": spec }), Some(a.seed));
    let img = load_pgm(&a.input)?;
    let out = degrade::apply(&spec, &img)?;
    ensure_parent(&a.out)?;
    save_pgm(&a.out, &out)?;
    rec.output(&a.out);
    Ok(manifest::for_file(&a.out))
}

fn baseline(a: BaselineArgs, rec: &mut Recorder) -> Result<PathBuf> {
    let images = data_io::load_features(&a.train_images)?;
    let videos = data_io::load_features(&a.train_videos)?;
    if images.dim != videos.dim {
        return Err(anyhow!(
            "feature files disagree on dimension: {} and {}",
            images.dim,
            videos.dim
        ));
    }
    let transform = match a.method {
        MethodArg::Pca => {
            rec.config(
                serde_json::json!({"method": "pca", "retain": a.retain}),
                None,
            );
            let rows: Vec<Vec<f64>> = images.rows.iter().chain(&videos.rows).cloned().collect();
            pca_transform(&rows, a.retain)?.transform
        }
        MethodArg::Coral => {
            rec.config(
                serde_json::json!({"method": "coral", "lambda": a.lambda}),
                None,
            );
            coral_transform(
                &fit_stats(&videos.rows)?,
                &fit_stats(&images.rows)?,
                a.lambda,
            )?
        }
    };
    ensure_parent(&a.out)?;
    transform.save(&a.out)?;
    rec.output(&a.out);
    Ok(manifest::for_file(&a.out))
}

fn embed(a: EmbedArgs, rec: &mut Recorder) -> Result<PathBuf> {
    rec.config(
        serde_json::json!({
            "source": if a.images.is_some() { "images" } else { "videos" },
            "network": a.network.network,
        }),
        None,
    );
    let net = load_embedder(&a.network.network, &a.ckpt)?;
    let frames: Vec<vda_core::Image> = match (&a.images, &a.videos) {
        (Some(m), _) => load_images(m)?.into_iter().map(|li| li.image).collect(),
        (None, Some(m)) => load_videos(m)?.into_iter().flat_map(|v| v.frames).collect(),
        (None, None) => {
            return Err(UsageError("one of --images or --videos is required".into()).into())
        }
    };
    let rows = frame_features(&net, &frames)?;
    let features = FeatureMatrix::new(net.output_dim(), rows)?;
    ensure_parent(&a.out)?;
    save_features(&a.out, &features)?;
    rec.output(&a.out);
    Ok(manifest::for_file(&a.out))
}

fn ablation(a: AblationArgs, rec: &mut Recorder) -> Result<PathBuf> {
    let frames = a
        .frames
        .clone()
        .unwrap_or_else(|| FrameCount::TABLE.to_vec());
    let corpus = ToyCorpus::load(&a.toy)
        .with_context(|| format!("loading toy corpus {}", a.toy.display()))?;
    let configs: Vec<(Model, TrainConfig)> = Model::ALL
        .into_iter()
        .map(|m| {
            let mut cfg = TrainConfig::preset(m);
            cfg.seed = a.seed;
            if let Some(n) = a.iterations {
                cfg.iterations = n;
            }
            (m, cfg)
        })
        .collect();
    let mut pre = PretrainConfig::toy();
    pre.seed = a.seed;
    if let Some(n) = a.pretrain_iterations {
        pre.iterations = n;
    }
    rec.config(
        serde_json::json!({
            "preset": "table1",
            "frames": frames,
            "models": configs.iter().map(|(m, c)| (m.name().to_string(), c)).collect::<std::collections::BTreeMap<_, _>>(),
            "pretrain": if a.rfnet.is_some() { Value::Null } else { to_json(&pre)? },
        }),
        Some(a.seed),
    );
    let rfnet = match &a.rfnet {
        Some(p) => build_rfnet(&pre.network, &ParamStore::load(p)?)?,
        None => pretrain_rfnet(&corpus.images, &pre)?,
    };
    let models = train_models(&configs, &rfnet, &corpus)?;
    let table = run_ablation(&rfnet, &models, &corpus, &frames, a.seed)?;
    match &a.out {
        Some(out) => {
            write_json(out, &table)?;
            rec.output(out);
            Ok(manifest::for_file(out))
        }
        None => {
            println!("{}", serde_json::to_string_pretty(&table)?);
            rec.output(Path::new("-"));
            Ok(a.toy.join("ablation.manifest.json"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn preset_overrides_merge() {
        let cfg = resolve_train_config(json!({"preset": "F", "iterations": 7, "seed": 3})).unwrap();
        let mut expect = TrainConfig::preset(Model::F);
        expect.iterations = 7;
        expect.seed = 3;
        assert_eq!(cfg, expect);
    }

    #[test]
    fn full_config_round_trips() {
        let base = TrainConfig::preset(Model::C);
        let cfg = resolve_train_config(serde_json::to_value(&base).unwrap()).unwrap();
        assert_eq!(cfg, base);
    }

    #[test]
    fn bad_presets_are_rejected() {
        assert!(resolve_train_config(json!({"preset": "Z"})).is_err());
        assert!(resolve_train_config(json!({"preset": 4})).is_err());
        assert!(resolve_train_config(json!({"preset": "A", "lr": -1.0})).is_err());
    }

    #[test]
    fn merge_recurses_into_objects() {
        let mut base = json!({"a": {"x": 1, "y": 2}, "b": 3});
        merge(&mut base, json!({"a": {"y": 5}, "c": 4}));
        assert_eq!(base, json!({"a": {"x": 1, "y": 5}, "b": 3, "c": 4}));
    }
}
