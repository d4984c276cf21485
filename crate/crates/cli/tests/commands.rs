use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

use advsum::config::{Profile, TrainingConfig};
use advsum::corpus::Vocabulary;
use advsum::generator::{Generator, GeneratorConfig};
use advsum::policy::stream_rng;
use advsum_cli::{load_generator, loss_trace_path, save_generator, vocab_path};

const WORDS: [&str; 16] = [
    "storm", "river", "city", "council", "vote", "bridge", "closed", "rain", "school", "open", "market", "price", "rise", "fall",
    "team", "win",
];

/// A temporary run directory with a toy corpus and a small configuration.
struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(seed: u64) -> Self {
        let ws = Workspace {
            dir: tempfile::tempdir().unwrap(),
        };
        fs::write(ws.path("train.tsv"), corpus(24, 1)).unwrap();
        fs::write(ws.path("valid.tsv"), corpus(6, 2)).unwrap();
        let mut config = TrainingConfig::profile(Profile::Desk);
        config.vocab_size = 100;
        config.emb_dim = 8;
        config.hidden_dim = 12;
        config.disc_emb_dim = 8;
        config.disc_windows = vec![1, 2];
        config.disc_kernels = 4;
        config.source_len = 12;
        config.target_len = 4;
        config.batch_size = 8;
        config.rollouts = 2;
        config.g_steps = 2;
        config.d_steps = 1;
        config.sources_per_step = 4;
        config.disc_batch_size = 8;
        config.pretrain_epochs = 2;
        config.disc_epochs = 1;
        config.adv_rounds = 2;
        config.seed = seed;
        config.train_path = Some(ws.path("train.tsv"));
        config.valid_path = Some(ws.path("valid.tsv"));
        config.generator_checkpoint = Some(ws.path("gen.ckpt"));
        config.discriminator_checkpoint = Some(ws.path("disc.ckpt"));
        fs::write(ws.path("run.conf"), config.render()).unwrap();
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self) -> TrainingConfig {
        TrainingConfig::load(&self.path("run.conf")).unwrap()
    }

    fn run(&self, command: &str, extra: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_advsum"))
            .arg(command)
            .arg("--config")
            .arg(self.path("run.conf"))
            .args(extra)
            .output()
            .unwrap()
    }

    fn ok(&self, command: &str, extra: &[&str]) -> String {
        let out = self.run(command, extra);
        assert!(out.status.success(), "{command} failed: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }
}

/// Sources of 6 to 10 words; each target copies three of them in order.
fn corpus(n: usize, salt: usize) -> String {
    let mut text = String::new();
    for i in 0..n {
        let len = 6 + (i * 7 + salt) % 5;
        let source: Vec<&str> = (0..len).map(|j| WORDS[(i * 5 + j * 3 + salt) % WORDS.len()]).collect();
        let target = [source[0], source[2], source[len - 1]];
        text.push_str(&format!("{}\t{}\n", source.join(" "), target.join(" ")));
    }
    text
}

fn without_wall_ms(lines: &str) -> Vec<String> {
    lines.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect()
}

#[test]
fn zero_epochs_leave_the_initialization() {
    let ws = Workspace::new(3);
    ws.ok("pretrain-gen", &["--epochs", "0"]);
    let config = ws.config();
    let vocab = Vocabulary::load(&vocab_path(&ws.path("gen.ckpt")), config.vocab_size).unwrap();
    let gc = GeneratorConfig {
        vocab_size: vocab.len(),
        emb_dim: 8,
        hidden_dim: 12,
    };
    let fresh = Generator::new(gc, &mut stream_rng(3, 0)).unwrap();
    let state = load_generator(&ws.path("gen.ckpt"), &config).unwrap();
    assert_eq!(state.generator.params(), fresh.params());
    assert_eq!(state.epochs_done, 0);
    assert!(!loss_trace_path(&ws.path("gen.ckpt")).exists());
}

#[test]
fn resumed_pretraining_matches_an_uninterrupted_run() {
    let whole = Workspace::new(5);
    whole.ok("pretrain-gen", &["--epochs", "4"]);

    let split = Workspace::new(5);
    split.ok("pretrain-gen", &["--epochs", "2"]);
    split.ok("pretrain-gen", &["--epochs", "4", "--resume"]);

    let a = fs::read(whole.path("gen.ckpt")).unwrap();
    let b = fs::read(split.path("gen.ckpt")).unwrap();
    assert_eq!(a, b);
    let trace = |ws: &Workspace| without_wall_ms(&fs::read_to_string(loss_trace_path(&ws.path("gen.ckpt"))).unwrap());
    assert_eq!(trace(&whole), trace(&split));
    assert_eq!(trace(&whole).len(), 4);
}

#[test]
fn missing_dataset_gives_a_one_line_diagnostic() {
    let ws = Workspace::new(1);
    fs::remove_file(ws.path("train.tsv")).unwrap();
    let out = ws.run("pretrain-gen", &[]);
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    assert!(stderr.starts_with("error:") && stderr.contains("train.tsv"), "{stderr}");
}

#[test]
fn invalid_configuration_is_rejected() {
    let ws = Workspace::new(1);
    let out = ws.run("pretrain-gen", &["--lambda", "1.5"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("lambda"));

    fs::write(ws.path("run.conf"), "hidden_dim = 0\n").unwrap();
    assert!(!ws.run("pretrain-gen", &[]).status.success());
}

#[test]
fn later_phases_need_their_checkpoints() {
    let ws = Workspace::new(1);
    assert!(!ws.run("pretrain-disc", &[]).status.success());
    ws.ok("pretrain-gen", &["--epochs", "1"]);
    let out = ws.run("adv-train", &[]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("disc.ckpt"));
}

#[test]
fn zero_adversarial_rounds_leave_checkpoints_untouched() {
    let ws = Workspace::new(2);
    ws.ok("pretrain-gen", &["--epochs", "1"]);
    ws.ok("pretrain-disc", &[]);
    let gen = fs::read(ws.path("gen.ckpt")).unwrap();
    let disc = fs::read(ws.path("disc.ckpt")).unwrap();
    assert_eq!(ws.ok("adv-train", &["--epochs", "0"]), "");
    assert_eq!(fs::read(ws.path("gen.ckpt")).unwrap(), gen);
    assert_eq!(fs::read(ws.path("disc.ckpt")).unwrap(), disc);
}

#[test]
fn fixed_seeds_give_identical_traces_and_artifacts() {
    let run = || {
        let ws = Workspace::new(9);
        ws.ok("pretrain-gen", &[]);
        ws.ok("pretrain-disc", &[]);
        let trace = ws.ok("adv-train", &[]);
        (ws, trace)
    };
    let (a, ta) = run();
    let (b, tb) = run();
    assert_eq!(ta.lines().count(), 2);
    assert_eq!(without_wall_ms(&ta), without_wall_ms(&tb));
    for name in ["gen.ckpt", "disc.ckpt", "gen.ckpt.vocab"] {
        assert_eq!(fs::read(a.path(name)).unwrap(), fs::read(b.path(name)).unwrap(), "{name}");
    }
    let first_round = ta.lines().next().unwrap();
    assert!(first_round.starts_with("0,"), "{first_round}");

    // A continued run keeps numbering rounds.
    let more = a.ok("adv-train", &["--epochs", "1"]);
    assert!(more.starts_with("2,"), "{more}");
}

#[test]
fn empty_input_gives_empty_output() {
    let ws = Workspace::new(1);
    fs::write(ws.path("empty.txt"), "").unwrap();
    assert_eq!(ws.ok("summarize", &["--input", ws.path("empty.txt").to_str().unwrap()]), "");
}

#[test]
fn summaries_scored_externally_match_internal_evaluation() {
    let ws = Workspace::new(4);
    ws.ok("pretrain-gen", &[]);
    let sources: String = fs::read_to_string(ws.path("valid.tsv"))
        .unwrap()
        .lines()
        .map(|l| format!("{}\n", l.split_once('\t').unwrap().0))
        .collect();
    fs::write(ws.path("sources.txt"), sources).unwrap();
    let input = ws.path("sources.txt");
    let output = ws.path("summaries.txt");
    ws.ok("summarize", &["--input", input.to_str().unwrap(), "--output", output.to_str().unwrap()]);
    assert_eq!(fs::read_to_string(&output).unwrap().lines().count(), 6);

    let test = ws.path("valid.tsv");
    let internal = ws.ok("evaluate", &["--test", test.to_str().unwrap()]);
    let external = ws.ok("evaluate", &["--test", test.to_str().unwrap(), "--summaries", output.to_str().unwrap()]);
    assert_eq!(internal, external);
    assert!(internal.contains("val_rougeL"), "{internal}");
}

#[test]
fn copy_only_model_summarizes_with_source_words() {
    let ws = Workspace::new(6);
    ws.ok("pretrain-gen", &["--epochs", "1"]);
    let config = ws.config();
    let ckpt = ws.path("gen.ckpt");
    let mut state = load_generator(&ckpt, &config).unwrap();
    state.generator.params_mut().by_name_mut("ptr.bias").unwrap().data_mut()[0] = -60.0;
    save_generator(&ckpt, &state).unwrap();

    // Unseen words exercise the out-of-vocabulary copy path.
    let input = "Storm zyzzyva river quux city\nmarket glorp price rise\nVote\n";
    fs::write(ws.path("in.txt"), input).unwrap();
    let out = ws.ok("summarize", &["--input", ws.path("in.txt").to_str().unwrap()]);
    let out_lines: Vec<&str> = out.lines().collect();
    assert_eq!(out_lines.len(), 3);
    for (src, summary) in input.lines().zip(out_lines) {
        let src = src.to_lowercase();
        let allowed: Vec<&str> = src.split_whitespace().collect();
        assert!(!summary.is_empty());
        for tok in summary.split_whitespace() {
            assert!(allowed.contains(&tok), "{tok:?} not in {src:?}");
        }
    }
}

#[test]
fn help_lists_every_command() {
    let out = Command::new(env!("CARGO_BIN_EXE_advsum")).arg("--help").output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    for cmd in ["pretrain-gen", "pretrain-disc", "adv-train", "summarize", "evaluate"] {
        assert!(text.contains(cmd), "{cmd}");
    }
}
