//! Character-level LSTM teacher and a born-again student trained with the
//! teacher's per-step softmax plus the label loss.
//!
//! `cargo run --release -p banforge --example char_lm -- [corpus.txt] [epochs]`

use banforge::data::{load_char_corpus, parse_char_corpus, SplitTag, Splits};
use banforge::models::ModelSpec;
use banforge::objectives::DistillObjective;
use banforge::pipeline::{run_ban_sequence, BanPlan, LrSchedule, Metric, TrainConfig};
use rand::{Rng, SeedableRng};

/// Pseudo-English from a fixed word list, so the example needs no files.
fn babble(words: usize, seed: u64) -> String {
    const VOCAB: [&str; 24] = [
        "the",
        "a",
        "teacher",
        "student",
        "network",
        "learns",
        "from",
        "its",
        "own",
        "outputs",
        "and",
        "labels",
        "again",
        "born",
        "knowledge",
        "dark",
        "is",
        "in",
        "every",
        "generation",
        "softmax",
        "model",
        "trains",
        "well",
    ];
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    let mut prev = 0usize;
    for i in 0..words {
        // a sticky bigram structure gives the model something to learn
        let next = if rng.random::<f64>() < 0.6 {
            (prev * 7 + 3) % VOCAB.len()
        } else {
            rng.random_range(0..VOCAB.len())
        };
        out.push_str(VOCAB[next]);
        out.push(if i % 12 == 11 { '\n' } else { ' ' });
        prev = next;
    }
    out
}

fn main() -> banforge::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let corpus = match args.get(1).filter(|a| !a.is_empty() && *a != "-") {
        Some(p) => load_char_corpus(p.as_ref(), [0.8, 0.1, 0.1])?,
        None => parse_char_corpus(babble(6000, 5).as_bytes(), [0.8, 0.1, 0.1])?,
    };
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(4);
    let steps = 35;
    let data = Splits {
        train: corpus.sequences(SplitTag::Train, steps)?,
        val: corpus.sequences(SplitTag::Val, steps)?,
        test: corpus.sequences(SplitTag::Test, steps)?,
    };
    let spec = ModelSpec::lstm(corpus.vocab_size(), steps, 1, 48, 0);
    let mut cfg = TrainConfig::new(epochs, 16, 0.5);
    cfg.metric = Metric::Perplexity;
    cfg.schedule = LrSchedule::Adaptive {
        factor: 0.25,
        min_delta: 0.0,
    };
    cfg.max_grad_norm = Some(5.0);
    let mut plan = BanPlan::new(spec, cfg.clone(), 1);
    plan.student_config = Some(TrainConfig {
        objective: DistillObjective::kd_plus_label(1.0),
        ..cfg
    });
    let t = std::time::Instant::now();
    let gens = run_ban_sequence::<f64, _>(&plan, &data)?.into_result()?;
    for g in &gens {
        let ppl: Vec<String> = g.history.iter().map(|h| format!("{:.2}", h.val_metric)).collect();
        println!(
            "gen{} val ppl by epoch {} | test ppl {:.3}",
            g.record.generation,
            ppl.join(" "),
            g.record.test_metric
        );
    }
    println!("vocab {} | {:.1}s", corpus.vocab_size(), t.elapsed().as_secs_f64());
    Ok(())
}
