#![allow(dead_code)]

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use transderain::imagedata::save_image;
use transderain::imagedata::synth::{add_rain_streaks, dead_leaves};
use transderain::trainflow::Stage;

pub const BIN: &str = env!("CARGO_BIN_EXE_transderain");

/// `n` dead-leaves scenes under `root/clear` and streaked copies with the
/// same file names under `root/rainy`.
pub fn toy_tree(root: &Path, n: usize, side: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fs::create_dir_all(root.join("clear")).unwrap();
    fs::create_dir_all(root.join("rainy")).unwrap();
    for i in 0..n {
        let clear = dead_leaves(side, side, &mut rng);
        let rainy = add_rain_streaks(&clear, 12, &mut rng);
        save_image(&clear, root.join("clear").join(format!("{i:03}.png"))).unwrap();
        save_image(&rainy, root.join("rainy").join(format!("{i:03}.png"))).unwrap();
    }
}

/// Small four-stage configuration over a [`toy_tree`].
pub fn toy_config(data: &Path, out: &Path, steps: u64) -> String {
    let d = data.display();
    let mut s = format!(
        r#"seed = 11
output_dir = "{out}"

[model]
depth = 1
base_channels = 8
downsampling = 4

[data.recognition]
rainy = "{d}/rainy"
clear = "{d}/clear"

[data.reconstruction]
clear = ["{d}/clear"]

[data.distillation]
rainy = ["{d}/rainy"]

[data.finetune]
input = "{d}/rainy"
gt = "{d}/clear"

[data.evaluation]
input = "{d}/rainy"
gt = "{d}/clear"
"#,
        out = out.display()
    );
    for stage in Stage::ALL {
        let (enc, dec) = if stage == Stage::Finetune { (1e-4, 1e-3) } else { (1e-3, 1e-3) };
        s.push_str(&format!(
            "\n[stages.{stage}]\nencoder_lr = {enc:e}\ndecoder_lr = {dec:e}\nbatch_size = 2\ncrop_size = 16\nmax_steps = {steps}\neval_interval = 2\n"
        ));
    }
    s
}

pub fn write_config(dir: &Path, data: &Path, out: &Path, steps: u64) -> std::path::PathBuf {
    let path = dir.join("pipeline.toml");
    fs::write(&path, toy_config(data, out, steps)).unwrap();
    path
}

pub fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("TTDR_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}
