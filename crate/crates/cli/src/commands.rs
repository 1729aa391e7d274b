//! One function per subcommand. Each writes its resolved config, its
//! artifacts and a manifest into the output directory.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use perfusion_core::diffusion::{train_sft, NoiseSchedule, Trainable};
use perfusion_core::groupdpo::{reference_copy, train_dpo, DpoStepLog, Objective};
use perfusion_core::numerics::Checkpoint;
use perfusion_core::synthdata::{generate_world, write_jsonl, WorldConfig};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, TrainMode, TrainableChoice};
use crate::error::{CliError, CliResult};
use crate::manifest::{RunDir, RunManifest};
use crate::pipeline::{self, EvalPair};

pub const WORLD_FILE: &str = "world.json";

/// Appends rows to a CSV file, writing `header` first when the file is new.
pub fn append_csv(path: &Path, header: &str, rows: &[String]) -> CliResult<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CliError::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(header);
        text.push('\n');
    }
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| CliError::io(path, e))
}

fn save_checkpoint(run: &mut RunDir, name: &str, ckpt: &Checkpoint) -> CliResult<()> {
    ckpt.save(&run.file(name))?;
    run.produced(name);
    Ok(())
}

fn write_csv(run: &mut RunDir, name: &str, header: &str, rows: &[String]) -> CliResult<()> {
    append_csv(&run.file(name), header, rows)?;
    run.produced(name);
    Ok(())
}

fn epoch_rows(losses: &[f64]) -> Vec<String> {
    losses.iter().enumerate().map(|(e, l)| format!("{e},{l}")).collect()
}

/// World config, three split files and the backbone pretraining file.
pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> CliResult<RunManifest> {
    let mut run = RunDir::create(out, "gen-data", cfg)?;
    let world = generate_world(&cfg.world())?;
    let data = world.emit_dataset()?;
    for (name, recs) in [
        ("train.jsonl", &data.train),
        ("valid.jsonl", &data.valid),
        ("test.jsonl", &data.test),
    ] {
        write_jsonl(&run.file(name), recs)?;
        run.produced(name);
    }
    write_jsonl(&run.file("pretrain.jsonl"), &world.emit_pretrain()?)?;
    run.produced("pretrain.jsonl");
    let wc = serde_json::to_string_pretty(&world.config).expect("world config serializes") + "\n";
    run.write(WORLD_FILE, wc.as_bytes())?;
    run.produced(WORLD_FILE);
    run.finish()
}

pub fn pretrain_backbone(cfg: &ExperimentConfig, out: &Path) -> CliResult<RunManifest> {
    let mut run = RunDir::create(out, "pretrain-backbone", cfg)?;
    let pretrain = pipeline::read_records(&cfg.data_dir()?.join("pretrain.jsonl"))?;
    let (m, losses) = pipeline::pretrained_backbone(cfg, &pretrain)?;
    save_checkpoint(&mut run, "backbone.ckpt", &Checkpoint::from_model(&m))?;
    write_csv(&mut run, "pretrain_loss.csv", "epoch,loss", &epoch_rows(&losses))?;
    run.finish()
}

/// Fine-tunes plug-ins of the configured wiring on a frozen backbone, which
/// comes from `backbone_ckpt` or, with `pretrain`, is trained first.
pub fn train_rm(cfg: &ExperimentConfig, out: &Path, pretrain: bool) -> CliResult<RunManifest> {
    let wiring = cfg
        .wiring()?
        .ok_or_else(|| CliError::Config("train-rm needs a plug-in wiring, not \"none\"".into()))?;
    let mut run = RunDir::create(out, "train-rm", cfg)?;
    let data_dir = cfg.data_dir()?;
    let backbone = match (&cfg.backbone_ckpt, pretrain) {
        (Some(p), _) => {
            let mut m = pipeline::reward_from(cfg, &pipeline::load_checkpoint(p)?)?;
            m.detach_plugins();
            m
        }
        (None, true) => {
            let (m, losses) =
                pipeline::pretrained_backbone(cfg, &pipeline::read_records(&data_dir.join("pretrain.jsonl"))?)?;
            save_checkpoint(&mut run, "backbone.ckpt", &Checkpoint::from_model(&m))?;
            write_csv(&mut run, "pretrain_loss.csv", "epoch,loss", &epoch_rows(&losses))?;
            m
        }
        (None, false) => {
            return Err(CliError::Config(
                "backbone_ckpt is not set; pass --pretrain-backbone to train one first".into(),
            ))
        }
    };
    let train = pipeline::read_records(&data_dir.join("train.jsonl"))?;
    let (m, losses) = pipeline::finetuned_rm(cfg, &backbone, wiring, &train)?;
    save_checkpoint(&mut run, "rm.ckpt", &Checkpoint::from_model(&m))?;
    write_csv(&mut run, "rm_loss.csv", "epoch,loss", &epoch_rows(&losses))?;
    run.finish()
}

pub const EVAL_RM_HEADER: &str = "run_id,split,variant,map,gauc,n_groups,n_skipped";

/// MAP and GAUC on every split for the model in `rm_ckpt`, or for the bare
/// backbone in `backbone_ckpt` when no reward checkpoint is given.
pub fn eval_rm(cfg: &ExperimentConfig, out: &Path) -> CliResult<RunManifest> {
    let mut run = RunDir::create(out, "eval-rm", cfg)?;
    let path = cfg
        .rm_ckpt
        .as_ref()
        .or(cfg.backbone_ckpt.as_ref())
        .ok_or_else(|| CliError::Config("eval-rm needs rm_ckpt or backbone_ckpt".into()))?;
    let model = pipeline::reward_from(cfg, &pipeline::load_checkpoint(path)?)?;
    let variant = model.config.wiring.map_or("backbone", |w| w.name());
    let mut rows = Vec::new();
    for split in ["train", "valid", "test"] {
        let recs = pipeline::read_records(&cfg.data_dir()?.join(format!("{split}.jsonl")))?;
        let m = pipeline::evaluate_rm(&model, &recs)?;
        rows.push(format!(
            "{},{split},{variant},{},{},{},{}",
            run.run_id, m.map, m.gauc, m.n_groups, m.n_skipped
        ));
    }
    write_csv(&mut run, "eval_rm.csv", EVAL_RM_HEADER, &rows)?;
    run.finish()
}

fn dpo_rows(log: &[DpoStepLog]) -> Vec<String> {
    log.iter()
        .map(|l| format!("{},{},{},{}", l.step, l.mean_loss, l.mean_s_pos, l.mean_s_neg))
        .collect()
}

fn resolve_trainable(choice: TrainableChoice, personalized: bool, from_checkpoint: bool) -> Trainable {
    match choice {
        TrainableChoice::Backbone => Trainable::Backbone,
        TrainableChoice::Branch => Trainable::Branch,
        TrainableChoice::All => Trainable::All,
        TrainableChoice::Auto => match (personalized, from_checkpoint) {
            (false, _) => Trainable::Backbone,
            (true, true) => Trainable::Branch,
            (true, false) => Trainable::All,
        },
    }
}

/// Denoising or preference training of the denoiser. Preference modes start
/// from `reference_ckpt` and keep a frozen copy of it as the reference.
pub fn train_diffusion(cfg: &ExperimentConfig, out: &Path) -> CliResult<RunManifest> {
    let init =
        match cfg.mode {
            TrainMode::Sft => cfg.init_ckpt.as_ref(),
            TrainMode::PairwiseDpo | TrainMode::GroupDpo => Some(cfg.reference_ckpt.as_ref().ok_or_else(|| {
                CliError::Config("preference training needs reference_ckpt (an SFT checkpoint)".into())
            })?),
        };
    let mut run = RunDir::create(out, "train-diffusion", cfg)?;
    let mut model = match init {
        Some(p) => pipeline::denoiser_from(cfg, &pipeline::load_checkpoint(p)?)?,
        None => perfusion_core::diffusion::Denoiser::new(cfg.diffusion(), cfg.seed)?,
    };
    if cfg.personalization {
        if model.branch.is_none() {
            model.attach_branch(pipeline::branch_seed(cfg))?;
        }
    } else {
        model.branch = None;
    }
    let trainable = resolve_trainable(cfg.trainable, cfg.personalization, init.is_some());
    let train = pipeline::read_records(&cfg.data_dir()?.join("train.jsonl"))?;
    let sched = NoiseSchedule::linear(&cfg.diffusion().schedule)?;
    match cfg.mode {
        TrainMode::Sft => {
            let samples = pipeline::sft_samples(&train, cfg.personalization);
            let steps = if model.branch.is_some() && init.is_some() {
                cfg.branch_sft_steps
            } else {
                cfg.sft_steps
            };
            let losses = train_sft(&mut model, &samples, &sched, &cfg.sft_train(steps, trainable, 0))?;
            if losses.iter().any(|l| !l.is_finite()) {
                return Err(CliError::Numerical("denoising loss diverged".into()));
            }
            let rows: Vec<String> = losses.iter().enumerate().map(|(s, l)| format!("{s},{l}")).collect();
            write_csv(&mut run, "train_loss.csv", "step,loss", &rows)?;
        }
        TrainMode::PairwiseDpo | TrainMode::GroupDpo => {
            let objective = if cfg.mode == TrainMode::GroupDpo {
                Objective::Group
            } else {
                Objective::Pairwise
            };
            let groups = pipeline::preference_groups(&train, cfg.personalization)?;
            let reference = reference_copy(&model);
            let log = train_dpo(
                &mut model,
                &reference,
                &groups,
                &sched,
                &cfg.dpo_train(objective, trainable, 0),
            )?;
            if log.iter().any(|l| !l.mean_loss.is_finite()) {
                return Err(CliError::Numerical("preference loss diverged".into()));
            }
            write_csv(
                &mut run,
                "train_loss.csv",
                "step,mean_loss,mean_s_pos,mean_s_neg",
                &dpo_rows(&log),
            )?;
        }
    }
    save_checkpoint(&mut run, "diffusion.ckpt", &Checkpoint::from_model(&model))?;
    run.finish()
}

/// One generated item, as stored in `samples.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub run_id: String,
    pub user_id: usize,
    pub features: Vec<usize>,
    pub prompt_id: usize,
    pub condition: Vec<f64>,
    pub seed: u64,
    pub item: Vec<f64>,
}

impl SampleRow {
    fn pair(&self) -> EvalPair {
        EvalPair {
            user_id: self.user_id,
            features: self.features.clone(),
            prompt_id: self.prompt_id,
            condition: self.condition.clone(),
            seed: self.seed,
        }
    }
}

/// Samples for the first `n_eval_pairs` test (user, prompt) pairs. The user
/// profile is fed to the model exactly when the checkpoint has a branch.
pub fn sample(cfg: &ExperimentConfig, out: &Path) -> CliResult<RunManifest> {
    let path = cfg
        .diffusion_ckpt
        .as_ref()
        .ok_or_else(|| CliError::Config("sample needs diffusion_ckpt".into()))?;
    let mut run = RunDir::create(out, "sample", cfg)?;
    let model = pipeline::denoiser_from(cfg, &pipeline::load_checkpoint(path)?)?;
    let test = pipeline::read_records(&cfg.data_dir()?.join("test.jsonl"))?;
    let pairs = pipeline::eval_pairs(&test, cfg.n_eval_pairs, cfg.seed);
    let items = pipeline::generate(cfg, &model, &pairs, model.branch.is_some())?;
    let mut text = String::new();
    for (p, x) in pairs.iter().zip(items) {
        let row = SampleRow {
            run_id: run.run_id.clone(),
            user_id: p.user_id,
            features: p.features.clone(),
            prompt_id: p.prompt_id,
            condition: p.condition.clone(),
            seed: p.seed,
            item: x,
        };
        text.push_str(&serde_json::to_string(&row).expect("sample serializes"));
        text.push('\n');
    }
    run.write("samples.jsonl", text.as_bytes())?;
    run.produced("samples.jsonl");
    run.finish()
}

fn read_samples(path: &Path) -> CliResult<Vec<SampleRow>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| CliError::Config(format!("{}: {e}", path.display()))))
        .collect()
}

type PairKey = (usize, usize, u64);

pub const EVAL_GEN_HEADER: &str = "run_id,variant,n,mean_oracle,mean_rm";
pub const WIN_RATE_HEADER: &str = "run_id,variant,opponent,wins,losses,ties,win_rate";

/// Mean oracle score (and reward-model score when `rm_ckpt` is set) per
/// sample file, plus paired oracle win rates between every two variants.
pub fn eval_gen(cfg: &ExperimentConfig, out: &Path) -> CliResult<RunManifest> {
    if cfg.eval_variants.is_empty() {
        return Err(CliError::Config(
            "eval_variants is empty; expected name=path entries".into(),
        ));
    }
    let mut run = RunDir::create(out, "eval-gen", cfg)?;
    let world_path = cfg.data_dir()?.join(WORLD_FILE);
    let wtext = fs::read_to_string(&world_path).map_err(|e| CliError::io(&world_path, e))?;
    let wcfg: WorldConfig =
        serde_json::from_str(&wtext).map_err(|e| CliError::Config(format!("{}: {e}", world_path.display())))?;
    let world = generate_world(&wcfg)?;
    let rm = match &cfg.rm_ckpt {
        Some(p) => Some(pipeline::reward_from(cfg, &pipeline::load_checkpoint(p)?)?),
        None => None,
    };
    // (variant, (user, prompt, seed) per sample, oracle score per sample)
    let mut scored: Vec<(String, Vec<PairKey>, Vec<f64>)> = Vec::new();
    let mut rows = Vec::new();
    for entry in &cfg.eval_variants {
        let (name, path) = entry
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("eval variant {entry:?} is not name=path")))?;
        let samples = read_samples(Path::new(path))?;
        let pairs: Vec<EvalPair> = samples.iter().map(SampleRow::pair).collect();
        let items: Vec<Vec<f64>> = samples.iter().map(|s| s.item.clone()).collect();
        let oracle = pipeline::oracle_scores(&world, &pairs, &items)?;
        let mean_rm = match &rm {
            Some(m) => pipeline::mean(&pipeline::rm_scores(m, &pairs, &items)?),
            None => f64::NAN,
        };
        rows.push(format!(
            "{},{name},{},{},{mean_rm}",
            run.run_id,
            oracle.len(),
            pipeline::mean(&oracle)
        ));
        let keys = samples.iter().map(|s| (s.user_id, s.prompt_id, s.seed)).collect();
        scored.push((name.to_string(), keys, oracle));
    }
    write_csv(&mut run, "eval_gen.csv", EVAL_GEN_HEADER, &rows)?;
    let mut wins = Vec::new();
    for (a, ka, sa) in &scored {
        for (b, kb, sb) in &scored {
            if a == b {
                continue;
            }
            if ka != kb {
                return Err(CliError::Config(format!(
                    "variants {a} and {b} were sampled for different pairs"
                )));
            }
            let (w, l, t) = pipeline::paired_record(sa, sb);
            let rate = (w as f64 + 0.5 * t as f64) / sa.len() as f64;
            wins.push(format!("{},{a},{b},{w},{l},{t},{rate}", run.run_id));
        }
    }
    write_csv(&mut run, "win_rates.csv", WIN_RATE_HEADER, &wins)?;
    run.finish()
}
