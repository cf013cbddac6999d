use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use bagwise_core::bagging::{build_helper, segment, BaggingHelper, TokenId, Vocabulary};
use bagwise_core::bench::{bench_run, BenchConfig};
use bagwise_core::contrastive::{in_batch_recall_at_1, train_heads, BaggingPlacement, TrainConfig, TrainingPair};
use bagwise_core::embedding::ToyMixer;
use bagwise_core::format::EmbeddingFile;
use bagwise_core::retrieval::{
    build_index, evaluate, parse_jsonl, rerank, search, to_jsonl, two_stage, Qrels, RankedList, RetrievalIndex,
    RERANK_DEPTH,
};
use bagwise_core::similarity::{heatmap, score_batch, Direction, ItemEmbedding, ScoringMode};
use bagwise_core::synth::{CorpusFile, SynthConfig, SyntheticWorld};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Parser)]
#[command(name = "bagwise", version, about = "Bag-wise late-interaction retrieval toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Placement {
    Early,
    Late,
}

impl From<Placement> for BaggingPlacement {
    fn from(p: Placement) -> Self {
        match p {
            Placement::Early => BaggingPlacement::Early,
            Placement::Late => BaggingPlacement::Late,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Compile a vocabulary file into a bagging helper (JSON).
    BuildHelper {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment token sequences (one per line) into bags; prints JSONL.
    Bag {
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long)]
        helper: PathBuf,
    },
    /// Score every query against every candidate; prints CSV.
    Score {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        cands: PathBuf,
        #[arg(long, default_value = "global")]
        mode: ScoringMode,
        #[arg(long, default_value = "i2t")]
        direction: Direction,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Global search, optionally re-ranked to `--mode` over the top `--depth`.
    Search {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, default_value = "global")]
        mode: ScoringMode,
        #[arg(long, default_value = "i2t")]
        direction: Direction,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
        #[arg(long, default_value_t = RERANK_DEPTH)]
        depth: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-rank existing result lists with a late-interaction mode.
    Rerank {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long, default_value = "bagwise")]
        mode: ScoringMode,
        #[arg(long, default_value = "i2t")]
        direction: Direction,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recall@{1,5,10} and mean recall of result lists against qrels.
    Eval {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
    },
    /// Train projection heads on a corpus written by gen-synthetic.
    Train {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2.0)]
        lr: f64,
        #[arg(long, default_value_t = 0.1)]
        tau: f64,
        #[arg(long, default_value_t = 0.0)]
        tau_lr: f64,
        /// Pairs per batch; 0 uses one batch.
        #[arg(long, default_value_t = 0)]
        batch_size: usize,
        #[arg(long, default_value_t = 64)]
        joint_dim: usize,
        #[arg(long, value_enum, default_value = "late")]
        placement: Placement,
        /// Use a seeded tanh mixer instead of the identity mixer.
        #[arg(long)]
        mixer_seed: Option<u64>,
        #[arg(long)]
        no_renormalize: bool,
        #[arg(long)]
        separate_bwc_tau: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-patch activation map of one bag, as PGM plus a raw sidecar.
    Heatmap {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        image_id: Option<String>,
        #[arg(long)]
        text: PathBuf,
        #[arg(long)]
        text_id: Option<String>,
        #[arg(long)]
        bag_index: usize,
        /// Patch grid as HxW.
        #[arg(long)]
        grid: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-ranking latency/throughput benchmark; prints a JSON report.
    Bench {
        #[arg(long, default_value = "bagwise")]
        mode: ScoringMode,
        #[arg(long, default_value_t = 196)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        k: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 64)]
        candidates: usize,
        #[arg(long, default_value_t = 1000)]
        queries: usize,
        #[arg(long, default_value_t = 20)]
        warmup: usize,
        /// Worker threads; defaults to BAGF_THREADS, then the core count.
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic paired corpus with planted alignment.
    GenSynthetic {
        #[arg(long)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            match std::io::stdout().lock().write_all(text.as_bytes()) {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
                _ => Ok(()),
            }
        }
    }
}

fn load_items(path: &Path) -> Result<Vec<ItemEmbedding>> {
    Ok(EmbeddingFile::read(path)?.to_items()?)
}

fn load_index(path: &Path, mode: ScoringMode) -> Result<RetrievalIndex> {
    let modes: &[ScoringMode] = if mode.is_late() { &[mode] } else { &[] };
    Ok(build_index(load_items(path)?, modes)?)
}

fn pick<'a>(items: &'a [ItemEmbedding], id: Option<&str>, what: &str) -> Result<&'a ItemEmbedding> {
    match id {
        Some(id) => items
            .iter()
            .find(|it| it.id == id)
            .ok_or_else(|| bagwise_core::Error::UnknownId(id.to_string()).into()),
        None => items.first().ok_or_else(|| anyhow!("{what} file has no items")),
    }
}

fn parse_grid(grid: &str) -> Result<(usize, usize)> {
    let (h, w) = grid
        .split_once(['x', 'X'])
        .ok_or_else(|| anyhow!("grid must look like HxW, got {grid:?}"))?;
    Ok((h.trim().parse()?, w.trim().parse()?))
}

fn parse_token_lines(text: &str) -> Result<Vec<Vec<TokenId>>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_whitespace()
                .map(|t| t.parse::<TokenId>().with_context(|| format!("bad token id {t:?}")))
                .collect()
        })
        .collect()
}

fn write_embeddings(model: &bagwise_core::contrastive::TrainedModel, pairs: &[TrainingPair], dir: &Path) -> Result<()> {
    let images = pairs
        .iter()
        .map(|p| model.embed_image(&p.id, &p.image))
        .collect::<bagwise_core::Result<Vec<_>>>()?;
    let texts = pairs
        .iter()
        .map(|p| model.embed_text(&p.id, &p.text))
        .collect::<bagwise_core::Result<Vec<_>>>()?;
    let dim = model.visual_head.dim_out();
    EmbeddingFile::from_items(dim, &images)?.write(dir.join("images.bagf"))?;
    EmbeddingFile::from_items(dim, &texts)?.write(dir.join("texts.bagf"))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildHelper { vocab, out } => {
            let helper = build_helper(&Vocabulary::read(&vocab)?)?;
            fs::write(&out, helper.to_json()?)?;
        }
        Command::Bag { tokens, helper } => {
            let helper = BaggingHelper::from_json(&fs::read_to_string(&helper)?)?;
            let mut out = String::new();
            for (line, seq) in parse_token_lines(&fs::read_to_string(&tokens)?)?.iter().enumerate() {
                let seg = segment(seq, &helper);
                let spans: Vec<[usize; 2]> = seg.spans().map(|r| [r.start, r.end]).collect();
                let row = json!({ "line": line, "offsets": seg.offsets(), "bags": spans });
                out.push_str(&row.to_string());
                out.push('\n');
            }
            emit(None, &out)?;
        }
        Command::Score {
            queries,
            cands,
            mode,
            direction,
            out,
        } => {
            let q = load_items(&queries)?;
            let c = load_items(&cands)?;
            let m = score_batch(&q, &c, mode, direction)?;
            let mut csv = String::from("query");
            for it in &c {
                csv.push(',');
                csv.push_str(&it.id);
            }
            csv.push('\n');
            for (i, it) in q.iter().enumerate() {
                csv.push_str(&it.id);
                for v in m.row(i) {
                    csv.push_str(&format!(",{v}"));
                }
                csv.push('\n');
            }
            emit(out.as_deref(), &csv)?;
        }
        Command::Search {
            index,
            queries,
            mode,
            direction,
            top_k,
            depth,
            out,
        } => {
            let idx = load_index(&index, mode)?;
            let results = load_items(&queries)?
                .iter()
                .map(|q| {
                    let mut list = if mode == ScoringMode::Global {
                        search(&idx, q, mode, top_k)?
                    } else {
                        two_stage(&idx, q, mode, direction, depth)?
                    };
                    list.ranking.truncate(top_k);
                    Ok(list)
                })
                .collect::<bagwise_core::Result<Vec<_>>>()?;
            emit(out.as_deref(), &to_jsonl(&results)?)?;
        }
        Command::Rerank {
            index,
            queries,
            candidates,
            mode,
            direction,
            out,
        } => {
            let idx = load_index(&index, mode)?;
            let qs = load_items(&queries)?;
            let lists: Vec<RankedList> = parse_jsonl(&fs::read_to_string(&candidates)?)?;
            let results = lists
                .iter()
                .map(|list| {
                    let q = pick(&qs, Some(&list.query_id), "query")?;
                    Ok(rerank(&idx, q, list, mode, direction)?)
                })
                .collect::<Result<Vec<_>>>()?;
            emit(out.as_deref(), &to_jsonl(&results)?)?;
        }
        Command::Eval { results, qrels } => {
            let results: Vec<RankedList> = parse_jsonl(&fs::read_to_string(&results)?)?;
            let qrels = Qrels::parse_jsonl(&fs::read_to_string(&qrels)?)?;
            let report = evaluate(&results, &qrels)?;
            emit(None, &format!("{}\n", serde_json::to_string(&report)?))?;
        }
        Command::Train {
            pairs,
            epochs,
            lambda,
            seed,
            lr,
            tau,
            tau_lr,
            batch_size,
            joint_dim,
            placement,
            mixer_seed,
            no_renormalize,
            separate_bwc_tau,
            out,
        } => {
            let corpus: CorpusFile = serde_json::from_str(&fs::read_to_string(&pairs)?)?;
            let mixer = match mixer_seed {
                Some(s) => ToyMixer::seeded(corpus.dim, s),
                None => ToyMixer::identity(corpus.dim),
            };
            let encoder = corpus.text_encoder(mixer, placement.into())?;
            let training = corpus.training_pairs(&encoder)?;
            let config = TrainConfig {
                epochs,
                batch_size,
                learning_rate: lr,
                tau_learning_rate: tau_lr,
                lambda,
                init_tau: tau,
                joint_dim,
                seed,
                renormalize_bags: !no_renormalize,
                separate_bwc_tau,
            };
            let model = train_heads(&training, &config)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("heads.json"), serde_json::to_string_pretty(&model)?)?;
            fs::write(out.join("loss.csv"), model.loss_csv())?;
            write_embeddings(&model, &training, &out)?;
            let (i2t, t2i) = in_batch_recall_at_1(&model, &training)?;
            let last = model.history.last();
            let summary = json!({
                "pairs": training.len(),
                "epochs": epochs,
                "final_loss": last.map(|e| e.total(lambda)),
                "tau": model.tau.value(),
                "in_batch_r1": { "i2t": i2t, "t2i": t2i },
            });
            emit(None, &format!("{summary}\n"))?;
        }
        Command::Heatmap {
            image,
            image_id,
            text,
            text_id,
            bag_index,
            grid,
            out,
        } => {
            let (h, w) = parse_grid(&grid)?;
            let images = load_items(&image)?;
            let texts = load_items(&text)?;
            let img = pick(&images, image_id.as_deref(), "image")?;
            let txt = pick(&texts, text_id.as_deref(), "text")?;
            let visual = img
                .late
                .as_ref()
                .ok_or_else(|| bagwise_core::Error::MissingLateMatrix(img.id.clone()))?
                .compact();
            let bags = txt
                .late
                .as_ref()
                .ok_or_else(|| bagwise_core::Error::MissingLateMatrix(txt.id.clone()))?
                .compact();
            if bag_index >= bags.rows() {
                bail!("bag index {bag_index} out of range, text {} has {} bags", txt.id, bags.rows());
            }
            let map = heatmap(&visual, bags.row(bag_index), h, w)?;
            fs::write(&out, map.to_pgm())?;
            let mut sidecar = out.clone().into_os_string();
            sidecar.push(".txt");
            fs::write(sidecar, map.to_raw_text())?;
        }
        Command::Bench {
            mode,
            n,
            k,
            dim,
            candidates,
            queries,
            warmup,
            threads,
            seed,
            out,
        } => {
            let config = BenchConfig {
                n,
                k,
                dim,
                candidates,
                queries,
                warmup,
                threads,
                seed,
            };
            let report = bench_run(mode, &config)?;
            emit(out.as_deref(), &format!("{}\n", serde_json::to_string_pretty(&report)?))?;
        }
        Command::GenSynthetic { pairs, seed, dim, out } => {
            let world = SyntheticWorld::new(SynthConfig {
                seed,
                dim,
                ..SynthConfig::default()
            })?;
            let sampled = world.sample_pairs(pairs, seed, "p")?;
            let helper = world.helper()?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("corpus.json"), serde_json::to_string(&CorpusFile::from_world(&world, &sampled)?)?)?;
            world.vocabulary().write(out.join("vocab.txt"))?;
            fs::write(out.join("helper.json"), helper.to_json()?)?;
            let images = sampled
                .iter()
                .map(|p| world.latent_image_item(p))
                .collect::<bagwise_core::Result<Vec<_>>>()?;
            let texts = sampled
                .iter()
                .map(|p| world.latent_text_item(p, &helper, true))
                .collect::<bagwise_core::Result<Vec<_>>>()?;
            EmbeddingFile::from_items(dim, &images)?.write(out.join("images.bagf"))?;
            EmbeddingFile::from_items(dim, &texts)?.write(out.join("texts.bagf"))?;
            let mut qrels = Qrels::new();
            for p in &sampled {
                qrels.insert(p.id.clone(), [p.id.clone()]);
            }
            fs::write(out.join("qrels.jsonl"), qrels.to_jsonl()?)?;
            let (gh, gw) = world.patch_grid();
            emit(None, &format!("{}\n", json!({ "pairs": pairs, "dim": dim, "grid": format!("{gh}x{gw}") })))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = err
                .downcast_ref::<bagwise_core::Error>()
                .map_or("cli_error", bagwise_core::Error::code);
            let message = format!("{err:#}");
            eprintln!("{}", json!({ "error": code, "message": message }));
            ExitCode::FAILURE
        }
    }
}
