use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use dalab::analysis::{
    all_variants, evaluate_alignment, evaluate_mass, export_heatmap, param_report, probe_pair_classification,
    probe_token_tagging, write_probe_csv, PairSample, ProbeKind, ProbeTask,
};
use dalab::corpus::{bilingual_row, generate_base_corpus, CorpusFile, World};
use dalab::model::{parse_kv, Checkpoint, EncoderInput, ModelConfig, VariantKind};
use dalab::objectives::LossMode;
use dalab::trainer::{TrainConfig, Trainer};
use dalab::{Error, Result};

#[derive(Parser)]
#[command(name = "dalab", version, about = "Mixed vs decomposed cross-lingual attention at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an encoder on the synthetic corpus.
    Train {
        #[arg(long, value_parser = parse_variant)]
        model: VariantKind,
        #[arg(long, value_parser = parse_objective, default_value = "ce")]
        objective: LossMode,
        /// Flat key=value file overriding the desk defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Inspect a trained checkpoint.
    Analyze {
        #[arg(value_enum)]
        what: Analysis,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Parallel corpus file; defaults to held-out pairs of the
        /// checkpoint's own world.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Pairs (or heatmaps) to use.
        #[arg(long, default_value_t = 200)]
        limit: usize,
        /// Probe seeds `0..seeds`.
        #[arg(long, default_value_t = 8)]
        seeds: u64,
    },
    /// Write mono and parallel corpus files of a config's world.
    Corpus {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        sentences: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Analysis {
    Heatmap,
    Align,
    Mass,
    Params,
    Probe,
}

fn parse_variant(s: &str) -> std::result::Result<VariantKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_objective(s: &str) -> std::result::Result<LossMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::from_text(&fs::read_to_string(p)?),
        None => Ok(TrainConfig::desk(VariantKind::Da)),
    }
}

fn train(
    model: VariantKind,
    objective: LossMode,
    config: Option<PathBuf>,
    seed: u64,
    out: PathBuf,
    resume: Option<PathBuf>,
) -> Result<()> {
    let mut trainer = match resume {
        Some(path) => Trainer::resume(&Checkpoint::load(&path)?)?,
        None => {
            let mut cfg = TrainConfig::desk(model);
            if let Some(path) = config {
                cfg.apply_kv(&parse_kv(&fs::read_to_string(path)?)?)?;
            }
            let mut kv = BTreeMap::new();
            kv.insert("variant".to_string(), model.name().to_string());
            kv.insert("objective".to_string(), objective.to_string());
            kv.insert("seed".to_string(), seed.to_string());
            cfg.apply_kv(&kv)?;
            Trainer::new(cfg)?
        }
    }
    .with_output(&out)?;
    let total = trainer.cfg.optim.total_steps;
    let start = Instant::now();
    while trainer.state.step < total {
        let chunk = (total - trainer.state.step).min(100);
        let reports = trainer.run(chunk)?;
        let last = reports.last().expect("non-empty chunk");
        eprintln!(
            "step {:>6}  ce {:.4}  lr {:.2e}  {:.1}s",
            trainer.state.step,
            last.mean_ce,
            last.lr,
            start.elapsed().as_secs_f64()
        );
    }
    trainer.run_to_end()?;
    println!("{}", out.join("final.ckpt").display());
    Ok(())
}

/// Held-out pairs of the first configured language pair, or the pairs of
/// a corpus file.
fn eval_pairs(t: &Trainer, corpus: Option<&Path>, limit: usize) -> Result<Vec<PairSample>> {
    let max_len = t.cfg.data.schedule.max_len;
    match corpus {
        Some(path) => match CorpusFile::load(path)? {
            CorpusFile::Parallel { examples, .. } => examples
                .iter()
                .take(limit)
                .map(|e| {
                    let row = bilingual_row(e, max_len)?;
                    Ok(PairSample {
                        input: EncoderInput::new(row.tokens, row.layout)?,
                        gold: row.gold,
                    })
                })
                .collect(),
            CorpusFile::Mono { .. } => Err(Error::Corpus("analysis needs a parallel corpus".into())),
        },
        None => t.held_out_pairs(limit),
    }
}

fn analyze(what: Analysis, checkpoint: &Path, corpus: Option<&Path>, out: &Path, limit: usize, seeds: u64) -> Result<()> {
    fs::create_dir_all(out)?;
    let ck = Checkpoint::load(checkpoint)?;
    let t = Trainer::resume(&ck)?;
    let enc = &t.state.encoder;
    match what {
        Analysis::Params => {
            let table = param_report(&all_variants(|k| {
                let c = enc.cfg.clone();
                let mut m = ModelConfig::sized(k, c.vocab_size, c.num_languages, c.embedding_dim, c.num_heads, c.num_layers, c.ffn_dim, c.max_positions);
                m.tie_lm_head = c.tie_lm_head;
                m
            }))?;
            let base = param_report(&all_variants(ModelConfig::paper_base))?;
            fs::write(out.join("params.csv"), table.render())?;
            fs::write(out.join("params_base.csv"), base.render())?;
            print!("{}", table.render());
        }
        Analysis::Align => {
            let samples = eval_pairs(&t, corpus, limit)?;
            let eval = evaluate_alignment(enc, &samples)?;
            let mut csv = String::from("layer,tag,accuracy,x_to_y,y_to_x,ties,rows,uniform\n");
            for (l, s) in &eval.per_layer {
                csv.push_str(&format!(
                    "{l},{},{},{},{},{},{},{}\n",
                    eval.tag.name(),
                    s.accuracy,
                    s.x_to_y.accuracy(),
                    s.y_to_x.accuracy(),
                    s.ties,
                    s.num_rows_evaluated,
                    s.uniform_baseline()
                ));
            }
            fs::write(out.join("align.csv"), &csv)?;
            print!("{csv}");
        }
        Analysis::Mass => {
            let samples = eval_pairs(&t, corpus, limit)?;
            let mut csv = String::from("layer,intra,cross\n");
            for (l, i, c) in evaluate_mass(enc, &samples)? {
                csv.push_str(&format!("{l},{i},{c}\n"));
            }
            fs::write(out.join("mass.csv"), &csv)?;
            print!("{csv}");
        }
        Analysis::Heatmap => {
            let samples = eval_pairs(&t, corpus, limit.min(5))?;
            let inputs: Vec<EncoderInput> = samples.iter().map(|s| s.input.clone()).collect();
            let records = dalab::analysis::collect_records(enc, &inputs, dalab::model::ForwardMode::Full)?;
            for r in &records {
                let s = &samples[r.row];
                let stem = format!("row{}_layer{}_{}", r.row, r.layer, r.tag.name().to_lowercase());
                let files = export_heatmap(r, None, &s.labels(&t.world.vocab), &s.gold, out, &stem)?;
                println!("{}", files.csv.display());
            }
        }
        Analysis::Probe => {
            let src = t.cfg.data.pairs.first().map_or(0, |p| p.source);
            let others: Vec<usize> = (0..t.world.num_languages()).filter(|&l| l != src).collect();
            let held_out = generate_base_corpus(&t.world.grammar, t.cfg.data.corpus_seed.wrapping_add(2), 2000);
            let mut rows = Vec::new();
            for kind in [ProbeKind::PairClassification, ProbeKind::TokenTagging] {
                let task = ProbeTask::new(kind, src, others.clone());
                for seed in 0..seeds {
                    let o = match kind {
                        ProbeKind::PairClassification => probe_pair_classification(enc, &t.world, &held_out, &task, seed)?,
                        ProbeKind::TokenTagging => probe_token_tagging(enc, &t.world, &held_out, &task, seed)?,
                    };
                    rows.extend(o.rows());
                }
            }
            write_probe_csv(&out.join("probe.csv"), &rows)?;
            print!("{}", fs::read_to_string(out.join("probe.csv"))?);
        }
    }
    Ok(())
}

fn corpus(config: Option<&Path>, sentences: usize, seed: u64, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let (world, _) = cfg.data.build()?;
    let base = generate_base_corpus(&world.grammar, seed, sentences);
    fs::create_dir_all(out)?;
    write_world(&world, &base, &cfg, out)
}

fn write_world(world: &World, base: &[Vec<usize>], cfg: &TrainConfig, out: &Path) -> Result<()> {
    for spec in &world.languages {
        let sentences = base
            .iter()
            .map(|s| dalab::corpus::derive_language(s, spec).map(|x| x.0))
            .collect::<Result<_>>()?;
        let f = CorpusFile::Mono {
            language: spec.language_id,
            sentences,
        };
        let path = out.join(format!("mono_{}.txt", spec.name));
        f.save(&path)?;
        println!("{}", path.display());
    }
    for p in &cfg.data.pairs {
        let (a, b) = (world.language(p.source)?, world.language(p.target)?);
        let examples = base
            .iter()
            .map(|s| dalab::corpus::build_bilingual_example(s, a, b))
            .collect::<Result<_>>()?;
        let f = CorpusFile::Parallel {
            source: p.source,
            target: p.target,
            examples,
        };
        let path = out.join(format!("parallel_{}_{}.txt", a.name, b.name));
        f.save(&path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            model,
            objective,
            config,
            seed,
            out,
            resume,
        } => train(model, objective, config, seed, out, resume),
        Command::Analyze {
            what,
            checkpoint,
            corpus,
            out,
            limit,
            seeds,
        } => analyze(what, &checkpoint, corpus.as_deref(), &out, limit, seeds),
        Command::Corpus {
            config,
            sentences,
            seed,
            out,
        } => corpus(config.as_deref(), sentences, seed, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
