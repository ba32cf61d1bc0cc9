use std::fs;
use std::io::Write;
use std::path::Path;

use gpn::checkpoint::Checkpoint;
use gpn::gradsuite::{render_table, run_suite};
use gpn::synthdata::{generate_corpus, read_corpus, write_corpus, Corpus, Vocabulary};
use gpn::trainer::{
    ablate, checkpoint_for, evaluate, generate_records, model_from_checkpoint, train, AblationSetup, GeneratedRecord,
    Variant,
};
use gpn::{Gpn, GpnError, Result};

use crate::config::{Config, Split};
use crate::Command;

/// Run one subcommand. `Ok(false)` means the command completed but a check
/// it performs failed.
pub fn run(command: Command, cfg: &Config) -> Result<bool> {
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir)?;
    fs::write(
        dir.join(format!("{}-resolved-config.cfg", command.name())),
        cfg.to_text(),
    )?;
    let vocab = Vocabulary::standard();
    match command {
        Command::GenData => gen_data(cfg, &vocab),
        Command::Train => run_train(cfg, &vocab),
        Command::Eval => run_eval(cfg, &vocab),
        Command::Generate => run_generate(cfg, &vocab),
        Command::Gradcheck => run_gradcheck(cfg),
        Command::Ablate => run_ablate(cfg, &vocab),
    }
}

fn gen_data(cfg: &Config, vocab: &Vocabulary) -> Result<bool> {
    fs::create_dir_all(cfg.data_dir())?;
    for split in [Split::Train, Split::Valid, Split::Test] {
        let scenes = cfg.scenes(split);
        if scenes.is_empty() {
            continue;
        }
        let corpus = generate_corpus(vocab, cfg.seed, scenes, cfg.noise_sigma)?;
        let path = cfg.corpus_path(split);
        write_corpus(&corpus, &path)?;
        println!(
            "{:<5} {:>6} scenes {:>7} examples -> {}",
            split.as_str(),
            corpus.scenes.len(),
            corpus.len(),
            path.display()
        );
    }
    Ok(true)
}

/// Load a split written by `gen-data`, refusing one rendered under different settings.
fn load_split(cfg: &Config, split: Split) -> Result<Corpus> {
    let path = cfg.corpus_path(split);
    let corpus = read_corpus(&path).map_err(|e| match e {
        GpnError::Io(io) => GpnError::Data(format!("cannot read {} ({io}); run gen-data first", path.display())),
        other => other,
    })?;
    let ids: Vec<u64> = corpus.scenes.iter().map(|s| s.scene_id).collect();
    let expected: Vec<u64> = cfg.scenes(split).collect();
    if corpus.corpus_seed != cfg.seed || corpus.noise_sigma != cfg.noise_sigma || ids != expected {
        return Err(GpnError::Data(format!(
            "{} was generated with different seed, noise or scene range than the current config",
            path.display()
        )));
    }
    Ok(corpus)
}

fn load_valid(cfg: &Config) -> Result<Option<Corpus>> {
    if cfg.valid_scenes.is_empty() {
        Ok(None)
    } else {
        load_split(cfg, Split::Valid).map(Some)
    }
}

fn run_train(cfg: &Config, vocab: &Vocabulary) -> Result<bool> {
    let train_set = load_split(cfg, Split::Train)?;
    let valid = load_valid(cfg)?;
    let dir = cfg.run_dir();
    let outcome = train(
        cfg.model_config(vocab),
        &cfg.train_settings(),
        &train_set,
        valid.as_ref(),
        vocab,
        Some(&dir),
    )?;
    let kept = match outcome.best {
        Some(ck) => ck,
        None => checkpoint_for(&outcome.model, vocab, cfg.max_steps)?,
    };
    kept.save(dir.join("model.gpn"))?;
    if let Some(last) = outcome.record.steps.last() {
        println!("step {} l_total {:.4}", last.step, last.loss.l_total);
    }
    for v in &outcome.record.validations {
        println!(
            "validation step {:>7} l_total {:.4}{}",
            v.step,
            v.l_total,
            if v.improved { "  (kept)" } else { "" }
        );
    }
    println!("model -> {}", dir.join("model.gpn").display());
    Ok(true)
}

fn load_model(cfg: &Config, vocab: &Vocabulary) -> Result<Gpn> {
    let path = cfg.checkpoint_path();
    let ck = Checkpoint::load(&path).map_err(|e| match e {
        GpnError::Io(io) => GpnError::Data(format!("cannot read checkpoint {} ({io})", path.display())),
        other => other,
    })?;
    model_from_checkpoint(&ck, vocab)
}

fn write_jsonl(path: &Path, records: &[GeneratedRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn run_eval(cfg: &Config, vocab: &Vocabulary) -> Result<bool> {
    let model = load_model(cfg, vocab)?;
    let corpus = load_split(cfg, cfg.eval_split)?;
    let (report, generated) = evaluate(&model, vocab, &corpus, &cfg.eval_options())?;
    let dir = cfg.run_dir();
    let text = report.to_text();
    fs::write(dir.join("eval-report.txt"), &text)?;
    fs::write(dir.join("eval-report.json"), serde_json::to_string_pretty(&report)?)?;
    write_jsonl(&dir.join("eval-generated.jsonl"), &generated)?;
    print!("{text}");
    Ok(true)
}

fn run_generate(cfg: &Config, vocab: &Vocabulary) -> Result<bool> {
    let model = load_model(cfg, vocab)?;
    let corpus = load_split(cfg, cfg.eval_split)?;
    let (report, generated) = generate_records(&model, vocab, &corpus, &cfg.eval_options())?;
    let path = cfg.run_dir().join("generated.jsonl");
    write_jsonl(&path, &generated)?;
    println!(
        "{} pairs, {:.1}% answerable -> {}",
        report.total,
        100.0 * report.answerable,
        path.display()
    );
    Ok(true)
}

fn run_gradcheck(cfg: &Config) -> Result<bool> {
    let entries = run_suite(cfg.seed, &cfg.toy)?;
    let table = render_table(&entries);
    let dir = cfg.run_dir();
    fs::write(dir.join("gradcheck.txt"), &table)?;
    fs::write(dir.join("gradcheck.json"), serde_json::to_string_pretty(&entries)?)?;
    print!("{table}");
    Ok(entries.iter().all(|e| e.passed()))
}

fn run_ablate(cfg: &Config, vocab: &Vocabulary) -> Result<bool> {
    let train_set = load_split(cfg, Split::Train)?;
    let valid = load_valid(cfg)?;
    let test = load_split(cfg, Split::Test)?;
    let settings = cfg.train_settings();
    let variants = cfg
        .variants
        .iter()
        .map(|n| Variant::named(n, &settings))
        .collect::<Result<Vec<_>>>()?;
    let setup = AblationSetup {
        model: cfg.model_config(vocab),
        settings,
        train: &train_set,
        valid: valid.as_ref(),
        test: &test,
        vocab,
        eval: cfg.eval_options(),
    };
    let table = ablate(&setup, &variants, cfg.seeds)?;
    let dir = cfg.run_dir();
    let text = table.to_text();
    fs::write(dir.join("ablation.txt"), &text)?;
    fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(&table)?)?;
    print!("{text}");
    Ok(true)
}
