#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use masktext::dataset::write_label_png;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Palette used by generated fixtures; every word is in the default vocabulary.
pub const CLASSES: [(u16, &str, &str, [u8; 3]); 3] = [
    (1, "buildings", "destroyed", [255, 0, 0]),
    (2, "refugee camp", "newly established", [0, 0, 255]),
    (3, "greenhouse", "newly built", [0, 255, 0]),
];

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_masktext"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn palette_toml() -> String {
    let mut s = String::from("[palette]\nencoding = \"index\"\n");
    for (value, category, change_type, rgb) in CLASSES {
        s.push_str(&format!(
            "\n[[palette.classes]]\nvalue = {value}\ncategory = \"{category}\"\ntype = \"{change_type}\"\nrgb = [{}, {}, {}]\n",
            rgb[0], rgb[1], rgb[2]
        ));
    }
    s
}

/// Random rectangles of 0..=3 classes; later rectangles overwrite earlier ones.
pub fn random_labels(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Vec<u16> {
    let mut labels = vec![0u16; w * h];
    for (value, ..) in CLASSES {
        if rng.gen_bool(0.3) {
            continue;
        }
        for _ in 0..rng.gen_range(1..=3) {
            let rw = rng.gen_range(1..=w / 2);
            let rh = rng.gen_range(1..=h / 2);
            let x0 = rng.gen_range(0..=w - rw);
            let y0 = rng.gen_range(0..=h - rh);
            for y in y0..y0 + rh {
                labels[y * w + x0..y * w + x0 + rw].fill(value);
            }
        }
    }
    labels
}

/// Writes `n` masks into `dir/label` and a config listing them by directory.
/// Returns the config path.
pub fn write_fixture(dir: &Path, n: usize, size: usize, seed: u64) -> PathBuf {
    let labels_dir = dir.join("label");
    std::fs::create_dir_all(&labels_dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        let labels = random_labels(&mut rng, size, size);
        write_label_png(&labels_dir.join(format!("{i:05}.png")), size, size, &labels).unwrap();
    }
    let config = dir.join("config.toml");
    std::fs::write(
        &config,
        format!(
            "[dataset]\nsplit = \"train\"\nmask_dir = \"label\"\n\n{}",
            palette_toml()
        ),
    )
    .unwrap();
    config
}

pub fn read_jsonl(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}
