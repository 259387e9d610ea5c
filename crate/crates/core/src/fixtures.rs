//! Hand-built toy models with known behavior, for tests, demos and the
//! acceptance suite.
//!
//! Every token embedding is a zero-mean unit direction `(e_2j − e_2j+1)/√2`
//! with its own pair `j`, so LayerNorm maps a lone direction to `√d` times
//! itself and distinct concepts never interfere.

use std::fs;
use std::path::Path;

use ndarray::Array1;

use crate::adversarial::AttackTarget;
use crate::error::{Error, Result};
use crate::evaluation::{write_questions, MCQuestion};
use crate::model::{save_model, ModelConfig, TokenId, ToyModel, WordTokenizer};
use crate::sae::{make_toy_sae, save_sae, SparseAutoencoder};

fn pair_direction(d_model: usize, j: usize) -> Vec<f32> {
    let mut v = vec![0.0; d_model];
    let s = std::f32::consts::FRAC_1_SQRT_2;
    v[2 * j] = s;
    v[2 * j + 1] = -s;
    v
}

fn set_row(m: &mut ndarray::Array2<f32>, row: usize, v: &[f32], scale: f32) {
    for (dst, &x) in m.row_mut(row).iter_mut().zip(v) {
        *dst = x * scale;
    }
}

fn outer_add(m: &mut ndarray::Array2<f32>, a: &[f32], b: &[f32], scale: f32) {
    for (i, &x) in a.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (j, &y) in b.iter().enumerate() {
            m[[i, j]] += scale * x * y;
        }
    }
}

const TOPIC_FORGET: &str = "virus";
const TOPIC_RETAIN: &str = "history";
const ANSWER_CUE: &str = "Answer:";
const FILLER: [&str; 3] = ["the", "of", "a"];
const ANSWER_WORDS: [&str; 8] = ["amber", "birch", "cobalt", "dune", "ember", "fjord", "garnet", "heron"];

/// Two-topic question answering model with a planted-feature SAE at layer 0.
///
/// Block 0 averages the subject and topic directions of the prompt into
/// every later position (uniform causal attention, no MLP). Block 1 holds
/// one GELU "knowledge" neuron per question that fires only when both its
/// subject and its topic are present, writing the correct answer word's
/// unembedding direction. A large write into any residual direction at the
/// cue position swamps LayerNorm, silences every neuron and leaves the four
/// answer logits exactly tied.
#[derive(Debug, Clone)]
pub struct UnlearningFixture {
    pub model: ToyModel,
    pub sae: SparseAutoencoder,
    pub tokenizer: WordTokenizer,
    pub forget_questions: Vec<MCQuestion>,
    pub retain_questions: Vec<MCQuestion>,
    pub forget_corpus: Vec<Vec<TokenId>>,
    pub retain_corpus: Vec<Vec<TokenId>>,
    pub forget_latent: usize,
    pub retain_latent: usize,
    pub refusal_latent: usize,
}

pub const UNLEARNING_QUESTIONS_PER_TOPIC: usize = 16;

pub fn unlearning_fixture() -> Result<UnlearningFixture> {
    let n_q = UNLEARNING_QUESTIONS_PER_TOPIC;
    let d = 96;
    let d_sae = 256;
    let forget_subjects: Vec<String> = (0..n_q).map(|i| format!("fq{i}")).collect();
    let retain_subjects: Vec<String> = (0..n_q).map(|i| format!("rq{i}")).collect();

    let mut words: Vec<String> = vec![TOPIC_FORGET.into(), TOPIC_RETAIN.into(), ANSWER_CUE.into()];
    words.extend(FILLER.iter().map(|s| s.to_string()));
    words.extend(ANSWER_WORDS.iter().map(|s| s.to_string()));
    words.extend(forget_subjects.iter().cloned());
    words.extend(retain_subjects.iter().cloned());
    let tokenizer = WordTokenizer::new(words)?;
    let id = |w: &str| tokenizer.token_id(w).expect("fixture word") as usize;

    // Direction pairs: 0 forget topic, 1 retain topic, 2 cue, 3 refusal,
    // 4 filler, 5..13 answer words, 13.. subjects.
    let dir = |j: usize| pair_direction(d, j);
    let g_forget = dir(0);
    let g_retain = dir(1);
    let cue = dir(2);
    let refusal = dir(3);
    let filler = dir(4);
    let answer_dir = |a: usize| dir(5 + a);
    let subject_dir = |i: usize| dir(13 + i);
    assert!(13 + 2 * n_q <= d / 2);

    let mut config = ModelConfig::new(d, 2, 1, tokenizer.len(), 0);
    config.d_mlp = Some(2 * n_q);
    config.max_seq_len = 32;
    let mut model = ToyModel::zeros(config)?;

    set_row(&mut model.tok_emb, id(TOPIC_FORGET), &g_forget, 1.0);
    set_row(&mut model.tok_emb, id(TOPIC_RETAIN), &g_retain, 1.0);
    set_row(&mut model.tok_emb, id(ANSWER_CUE), &cue, 1.0);
    for w in FILLER {
        set_row(&mut model.tok_emb, id(w), &filler, 1.0);
    }
    for (a, w) in ANSWER_WORDS.iter().enumerate() {
        set_row(&mut model.tok_emb, id(w), &answer_dir(a), 1.0);
    }
    for i in 0..n_q {
        set_row(&mut model.tok_emb, id(&forget_subjects[i]), &subject_dir(i), 1.0);
        set_row(&mut model.tok_emb, id(&retain_subjects[i]), &subject_dir(n_q + i), 1.0);
    }

    // Block 0: copy topic and subject directions, nothing else.
    let copied: Vec<Vec<f32>> = [g_forget.clone(), g_retain.clone()]
        .into_iter()
        .chain((0..2 * n_q).map(subject_dir))
        .collect();
    let b0 = &mut model.blocks[0];
    for v in &copied {
        outer_add(&mut b0.w_v, v, v, 1.0);
    }
    b0.w_o = ndarray::Array2::eye(d);

    // Block 1: knowledge neurons.
    let kappa = 2.0;
    let bias = -10.0 * kappa;
    let answer_of = |q: usize| q % ANSWER_WORDS.len();
    let b1 = &mut model.blocks[1];
    for q in 0..2 * n_q {
        let topic = if q < n_q { &g_forget } else { &g_retain };
        let mut input: Vec<f32> = subject_dir(q);
        for (x, t) in input.iter_mut().zip(topic) {
            *x += t;
        }
        for (k, &x) in input.iter().enumerate() {
            b1.w_in[[k, q]] = kappa * x;
        }
        b1.b_in[q] = bias;
        let out = answer_dir(answer_of(q));
        for (k, &x) in out.iter().enumerate() {
            b1.w_out[[q, k]] = x;
        }
    }
    for (a, w) in ANSWER_WORDS.iter().enumerate() {
        let v = answer_dir(a);
        for (k, &x) in v.iter().enumerate() {
            model.unembed[[k, id(w)]] = x;
        }
    }

    let forget_latent = 37;
    let retain_latent = 101;
    let refusal_latent = 223;
    let sae = make_toy_sae(
        7,
        d,
        d_sae,
        &[
            (forget_latent, g_forget.clone()),
            (retain_latent, g_retain.clone()),
            (150, cue.clone()),
            (180, filler.clone()),
            (refusal_latent, refusal.clone()),
        ],
    )?;

    let make_questions = |subjects: &[String], topic: &str, offset: usize| -> Vec<MCQuestion> {
        subjects
            .iter()
            .enumerate()
            .map(|(i, subj)| {
                let correct = answer_of(offset + i);
                let answer_index = i % 4;
                let mut distractors = (1..ANSWER_WORDS.len()).map(|s| (correct + s) % ANSWER_WORDS.len());
                let choices: Vec<String> = (0..4)
                    .map(|slot| {
                        let a = if slot == answer_index { correct } else { distractors.next().expect("enough words") };
                        ANSWER_WORDS[a].to_string()
                    })
                    .collect();
                MCQuestion {
                    id: Some(format!("{topic}-{i}")),
                    stem: format!("the {topic} {subj}"),
                    choices,
                    answer_index,
                    subject: topic.to_string(),
                }
            })
            .collect()
    };
    let forget_questions = make_questions(&forget_subjects, TOPIC_FORGET, 0);
    let retain_questions = make_questions(&retain_subjects, TOPIC_RETAIN, n_q);

    let corpus = |subjects: &[String], topic: &str| -> Vec<Vec<TokenId>> {
        subjects
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let f = FILLER[i % FILLER.len()];
                tokenizer.encode(&format!("{f} {topic} {s} {f} {ANSWER_CUE} {}", ANSWER_WORDS[i % 8]))
            })
            .collect()
    };
    let forget_corpus = corpus(&forget_subjects, TOPIC_FORGET);
    let retain_corpus = corpus(&retain_subjects, TOPIC_RETAIN);

    Ok(UnlearningFixture {
        model,
        sae,
        tokenizer: tokenizer.clone(),
        forget_questions,
        retain_questions,
        forget_corpus,
        retain_corpus,
        forget_latent,
        retain_latent,
        refusal_latent,
    })
}

/// Suffix-attack fixture: every `trigger` token in the context raises the
/// `target` logit at the last position, so more triggers always lower the
/// target loss.
///
/// Attention is uniform. Every token embeds a shared baseline direction `b`
/// and the trigger adds `t`; attention maps `t` to a separate direction `o`.
/// The unembedding reads `o` for the target and `b` for a decoy answer, so
/// the target's log-probability is strictly increasing in the number of
/// triggers. With the 4-token prompt and an 8-token suffix the target
/// becomes the greedy answer from six triggers on.
#[derive(Debug, Clone)]
pub struct TriggerFixture {
    pub model: ToyModel,
    pub tokenizer: WordTokenizer,
    pub prompt: Vec<TokenId>,
    pub target: Vec<TokenId>,
    pub trigger: TokenId,
    pub attack: AttackTarget,
}

pub fn trigger_fixture() -> Result<TriggerFixture> {
    let d = 16;
    let mut words: Vec<String> = (1..=60).map(|i| format!("w{i}")).collect();
    words.extend(["decoy", "target", "trigger"].map(String::from));
    let tokenizer = WordTokenizer::new(words)?;
    let vocab = tokenizer.len();
    let id = |w: &str| tokenizer.token_id(w).expect("fixture word");
    let trigger = id("trigger");

    let base = pair_direction(d, 0);
    let t_dir = pair_direction(d, 1);
    let o_dir = pair_direction(d, 2);
    let mut config = ModelConfig::new(d, 1, 1, vocab, 0);
    config.max_seq_len = 64;
    let mut model = ToyModel::zeros(config)?;
    for tok in 0..vocab {
        set_row(&mut model.tok_emb, tok, &base, 1.0);
    }
    let mut trig = Array1::from(base.clone());
    trig.scaled_add(1.0, &Array1::from(t_dir.clone()));
    model.tok_emb.row_mut(trigger as usize).assign(&trig);

    let b0 = &mut model.blocks[0];
    outer_add(&mut b0.w_v, &t_dir, &o_dir, 0.75);
    b0.w_o = ndarray::Array2::eye(d);

    let scale = 6.0;
    for (k, &x) in o_dir.iter().enumerate() {
        model.unembed[[k, id("target") as usize]] = scale * x;
    }
    for (k, &x) in base.iter().enumerate() {
        model.unembed[[k, id("decoy") as usize]] = scale * x;
    }

    let attack = AttackTarget {
        id: "planted-trigger".into(),
        question: "w1 w2 w3 w4".into(),
        answer: "target".into(),
    };
    let prompt = tokenizer.encode(&attack.question);
    let target = tokenizer.encode(&attack.answer);
    Ok(TriggerFixture {
        model,
        tokenizer,
        prompt,
        target,
        trigger,
        attack,
    })
}

fn write_corpus(path: &Path, tokenizer: &WordTokenizer, docs: &[Vec<TokenId>]) -> Result<()> {
    let text: String = docs.iter().map(|d| tokenizer.decode(d) + "\n").collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes both fixtures in the on-disk formats the CLI reads.
///
/// Layout: `model/`, `sae/`, `vocab.txt`, `forget.jsonl`, `retain.jsonl`,
/// `forget_corpus.txt`, `retain_corpus.txt`, and `trigger/` holding
/// `model/`, `vocab.txt` and `attack.json`.
pub fn write_fixture_files(dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let u = unlearning_fixture()?;
    save_model(&u.model, dir.join("model"))?;
    save_sae(&u.sae, dir.join("sae"))?;
    u.tokenizer.save(dir.join("vocab.txt"))?;
    write_questions(dir.join("forget.jsonl"), &u.forget_questions)?;
    write_questions(dir.join("retain.jsonl"), &u.retain_questions)?;
    write_corpus(&dir.join("forget_corpus.txt"), &u.tokenizer, &u.forget_corpus)?;
    write_corpus(&dir.join("retain_corpus.txt"), &u.tokenizer, &u.retain_corpus)?;

    let t = trigger_fixture()?;
    let tdir = dir.join("trigger");
    save_model(&t.model, tdir.join("model"))?;
    t.tokenizer.save(tdir.join("vocab.txt"))?;
    let path = tdir.join("attack.json");
    fs::write(&path, serde_json::to_string_pretty(&t.attack)?).map_err(|e| Error::io(&path, e))
}
