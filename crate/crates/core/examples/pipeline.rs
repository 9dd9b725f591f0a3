//! The command-line pipeline driven from code in a scratch workdir:
//! pretrain-tool, warmup-policy, build-buffer, train, eval. Uses a shortened
//! schedule so it finishes in well under a minute.
//!
//! `cargo run --release --example pipeline`

use bgrto::cli::{self, Split};

fn main() -> bgrto::Result<()> {
    let dir = tempfile::tempdir().map_err(|e| bgrto::Error::Io { path: "tempdir".into(), source: e })?;
    let overrides = [
        format!("paths.workdir={}", dir.path().display()),
        "train.mode=b_grto".to_string(),
        "train.epochs=3".to_string(),
        "train.scenes_per_epoch=16".to_string(),
        "train.validation.scenes=32".to_string(),
    ];
    let cfg = cli::parse_config(None, &overrides)?;

    // training before the prerequisites exist names the missing step
    let err = cli::cmd_train(&cfg).unwrap_err();
    println!("premature train -> {}", cli::error_json(&err));

    for out in [cli::cmd_pretrain_tool(&cfg)?, cli::cmd_warmup_policy(&cfg)?, cli::cmd_build_buffer(&cfg)?, cli::cmd_train(&cfg)?] {
        println!("{out}");
    }
    let selected = cfg.run_dir().join("selected.ckpt");
    let report = cli::cmd_eval(&cfg, &selected, Split::Test, 128)?;
    println!("test gIoU {:.4} cIoU {:.4} validity {:.3}", report.giou, report.ciou, report.validity_rate);

    let mut files: Vec<String> = walkdir::WalkDir::new(dir.path())
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.path().strip_prefix(dir.path()).unwrap().display().to_string())
        .collect();
    files.sort();
    println!("workdir: {}", files.join(", "));
    Ok(())
}
