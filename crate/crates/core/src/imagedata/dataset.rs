use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{gaussian_blur, load_image, Image, ImageDataError, LabeledSample, PairedSample, Result};

pub const DEFAULT_BLUR_SIGMA: f64 = 1.5;
pub const DEFAULT_BLUR_RADIUS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetRole {
    Recognition,
    Reconstruction,
    Distillation,
    Finetune,
}

/// Where a dataset comes from and how it is built.
///
/// `sources` layout per role:
/// - recognition: `[rainy_dir, clear_dir]`
/// - reconstruction: one or more clear directories
/// - distillation: one or more rainy directories
/// - finetune: `[input_dir, gt_dir]`, paired by identical file name
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub role: DatasetRole,
    pub sources: Vec<PathBuf>,
    pub blur_sigma: Option<f64>,
    pub blur_radius: usize,
    pub seed: u64,
    /// Oversample the minority class so both recognition labels are equally
    /// frequent. Ignored for other roles.
    pub balance: bool,
}

impl DatasetSpec {
    pub fn recognition(rainy: impl Into<PathBuf>, clear: impl Into<PathBuf>, seed: u64) -> Self {
        Self {
            role: DatasetRole::Recognition,
            sources: vec![rainy.into(), clear.into()],
            blur_sigma: None,
            blur_radius: DEFAULT_BLUR_RADIUS,
            seed,
            balance: false,
        }
    }

    pub fn reconstruction(clear: impl Into<PathBuf>, sigma: f64, seed: u64) -> Self {
        Self {
            role: DatasetRole::Reconstruction,
            sources: vec![clear.into()],
            blur_sigma: Some(sigma),
            blur_radius: DEFAULT_BLUR_RADIUS,
            seed,
            balance: false,
        }
    }

    pub fn distillation(rainy: impl Into<PathBuf>, seed: u64) -> Self {
        Self {
            role: DatasetRole::Distillation,
            sources: vec![rainy.into()],
            blur_sigma: None,
            blur_radius: DEFAULT_BLUR_RADIUS,
            seed,
            balance: false,
        }
    }

    pub fn finetune(input: impl Into<PathBuf>, gt: impl Into<PathBuf>, seed: u64) -> Self {
        Self {
            role: DatasetRole::Finetune,
            sources: vec![input.into(), gt.into()],
            blur_sigma: None,
            blur_radius: DEFAULT_BLUR_RADIUS,
            seed,
            balance: false,
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.sources.len();
        let ok = match self.role {
            DatasetRole::Recognition | DatasetRole::Finetune => n == 2,
            DatasetRole::Reconstruction | DatasetRole::Distillation => n >= 1,
        };
        if !ok {
            return Err(ImageDataError::Config(format!(
                "{:?} dataset has {n} source directories",
                self.role
            )));
        }
        match (self.role, self.blur_sigma) {
            (DatasetRole::Reconstruction, None) => Err(ImageDataError::Config(
                "reconstruction dataset requires a blur sigma".into(),
            )),
            (DatasetRole::Reconstruction, Some(s)) if !(s > 0.0) => Err(ImageDataError::Config(
                format!("blur sigma must be positive, got {s}"),
            )),
            (DatasetRole::Reconstruction, Some(_)) => Ok(()),
            (_, Some(_)) => Err(ImageDataError::Config(
                "blur sigma only applies to reconstruction datasets".into(),
            )),
            (_, None) => Ok(()),
        }
    }
}

/// Built dataset: samples in seed-shuffled order with a stable id each.
#[derive(Clone, Debug)]
pub struct Dataset<S> {
    pub ids: Vec<String>,
    pub samples: Vec<S>,
}

impl<S> Dataset<S> {
    pub fn new(ids: Vec<String>, samples: Vec<S>) -> Self {
        assert_eq!(ids.len(), samples.len());
        Self { ids, samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &S)> {
        self.ids.iter().map(String::as_str).zip(&self.samples)
    }

    fn shuffled(mut self, seed: u64) -> Self {
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut slots: Vec<Option<S>> = self.samples.drain(..).map(Some).collect();
        let samples = order.iter().map(|&i| slots[i].take().expect("index used once")).collect();
        let ids = order.iter().map(|&i| self.ids[i].clone()).collect();
        Self { ids, samples }
    }
}

#[derive(Clone, Debug)]
pub enum AnyDataset {
    Recognition(Dataset<LabeledSample>),
    Reconstruction(Dataset<PairedSample>),
    Distillation(Dataset<Image>),
    Finetune(Dataset<PairedSample>),
}

impl AnyDataset {
    pub fn len(&self) -> usize {
        match self {
            AnyDataset::Recognition(d) => d.len(),
            AnyDataset::Reconstruction(d) | AnyDataset::Finetune(d) => d.len(),
            AnyDataset::Distillation(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn into_labeled(self) -> Result<Dataset<LabeledSample>> {
        match self {
            AnyDataset::Recognition(d) => Ok(d),
            other => Err(role_mismatch("recognition", &other)),
        }
    }

    pub fn into_paired(self) -> Result<Dataset<PairedSample>> {
        match self {
            AnyDataset::Reconstruction(d) | AnyDataset::Finetune(d) => Ok(d),
            other => Err(role_mismatch("paired", &other)),
        }
    }

    pub fn into_images(self) -> Result<Dataset<Image>> {
        match self {
            AnyDataset::Distillation(d) => Ok(d),
            other => Err(role_mismatch("distillation", &other)),
        }
    }
}

fn role_mismatch(wanted: &str, got: &AnyDataset) -> ImageDataError {
    let role = match got {
        AnyDataset::Recognition(_) => "recognition",
        AnyDataset::Reconstruction(_) => "reconstruction",
        AnyDataset::Distillation(_) => "distillation",
        AnyDataset::Finetune(_) => "finetune",
    };
    ImageDataError::Config(format!("expected a {wanted} dataset, got {role}"))
}

fn is_image_file(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
            .unwrap_or(false)
}

/// Image files (PNG/JPEG by extension) directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|source| ImageDataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|source| ImageDataError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let path = entry.path();
        if is_image_file(&path) {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(ImageDataError::Config(format!(
            "directory {} contains no PNG/JPEG images",
            dir.display()
        )));
    }
    Ok(files)
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Decodes in parallel; output order equals input order.
fn load_all(paths: &[PathBuf]) -> Result<Vec<Image>> {
    paths.par_iter().map(load_image).collect()
}

pub fn build_dataset(spec: &DatasetSpec) -> Result<AnyDataset> {
    spec.validate()?;
    match spec.role {
        DatasetRole::Recognition => {
            let rainy = list_images(&spec.sources[0])?;
            let clear = list_images(&spec.sources[1])?;
            let mut ids = Vec::new();
            let mut samples = Vec::new();
            let groups = [(&rainy, LabeledSample::RAINY, "rainy"), (&clear, LabeledSample::RAIN_FREE, "clear")];
            let target = if spec.balance { rainy.len().max(clear.len()) } else { 0 };
            for (paths, label, tag) in groups {
                let images = load_all(paths)?;
                let count = if spec.balance { target } else { images.len() };
                for i in 0..count {
                    let k = i % images.len();
                    let suffix = if i >= images.len() { format!("#{}", i / images.len()) } else { String::new() };
                    ids.push(format!("{tag}/{}{suffix}", file_name(&paths[k])));
                    samples.push(LabeledSample::new(images[k].clone(), label)?);
                }
            }
            Ok(AnyDataset::Recognition(Dataset::new(ids, samples).shuffled(spec.seed)))
        }
        DatasetRole::Reconstruction => {
            let sigma = spec.blur_sigma.expect("validated");
            let mut paths = Vec::new();
            for dir in &spec.sources {
                paths.extend(list_images(dir)?);
            }
            let clear = load_all(&paths)?;
            let samples = clear
                .into_par_iter()
                .map(|target| {
                    let input = gaussian_blur(&target, sigma, spec.blur_radius)?;
                    PairedSample::new(input, target)
                })
                .collect::<Result<Vec<_>>>()?;
            let ids = paths.iter().map(|p| file_name(p)).collect();
            Ok(AnyDataset::Reconstruction(Dataset::new(ids, samples).shuffled(spec.seed)))
        }
        DatasetRole::Distillation => {
            let mut paths = Vec::new();
            for dir in &spec.sources {
                paths.extend(list_images(dir)?);
            }
            let images = load_all(&paths)?;
            let ids = paths.iter().map(|p| file_name(p)).collect();
            Ok(AnyDataset::Distillation(Dataset::new(ids, images).shuffled(spec.seed)))
        }
        DatasetRole::Finetune => {
            let (ids, samples) = load_pairs(&spec.sources[0], &spec.sources[1])?;
            Ok(AnyDataset::Finetune(Dataset::new(ids, samples).shuffled(spec.seed)))
        }
    }
}

/// Pairs `input_dir/NAME` with `gt_dir/NAME`; any unmatched file is an error.
pub(crate) fn load_pairs(input_dir: &Path, gt_dir: &Path) -> Result<(Vec<String>, Vec<PairedSample>)> {
    let inputs: BTreeMap<String, PathBuf> =
        list_images(input_dir)?.into_iter().map(|p| (file_name(&p), p)).collect();
    let targets: BTreeMap<String, PathBuf> =
        list_images(gt_dir)?.into_iter().map(|p| (file_name(&p), p)).collect();
    if let Some(orphan) = inputs.keys().find(|k| !targets.contains_key(*k)) {
        return Err(ImageDataError::Config(format!(
            "input file {} has no partner in {}",
            input_dir.join(orphan).display(),
            gt_dir.display()
        )));
    }
    if let Some(orphan) = targets.keys().find(|k| !inputs.contains_key(*k)) {
        return Err(ImageDataError::Config(format!(
            "ground-truth file {} has no partner in {}",
            gt_dir.join(orphan).display(),
            input_dir.display()
        )));
    }
    let names: Vec<String> = inputs.keys().cloned().collect();
    let samples = names
        .par_iter()
        .map(|name| PairedSample::new(load_image(&inputs[name])?, load_image(&targets[name])?))
        .collect::<Result<Vec<_>>>()?;
    Ok((names, samples))
}

/// Epoch-based index sampler: walks a seeded permutation of the dataset and
/// reshuffles at every epoch boundary.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, seed: u64) -> Self {
        assert!(len > 0, "cannot sample from an empty dataset");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Self { order, cursor: 0, rng }
    }

    pub fn next_index(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let i = self.order[self.cursor];
        self.cursor += 1;
        i
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size).map(|_| self.next_index()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagedata::save_image;

    fn write(dir: &Path, name: &str, value: f32) {
        std::fs::create_dir_all(dir).unwrap();
        let img = Image::from_fn(12, 12, |y, x, c| (value + 0.01 * ((y + x + c) % 5) as f32).min(1.0));
        save_image(&img, dir.join(name)).unwrap();
    }

    #[test]
    fn recognition_labels_follow_directories() {
        let root = tempfile::tempdir().unwrap();
        let rainy = root.path().join("rainy");
        let clear = root.path().join("clear");
        write(&rainy, "a.png", 0.2);
        write(&rainy, "b.png", 0.3);
        write(&clear, "c.png", 0.6);
        write(&clear, "d.png", 0.7);
        let ds = build_dataset(&DatasetSpec::recognition(&rainy, &clear, 5))
            .unwrap()
            .into_labeled()
            .unwrap();
        assert_eq!(ds.len(), 4);
        let mut labels: Vec<f32> = ds.samples.iter().map(|s| s.label).collect();
        labels.sort_by(f32::total_cmp);
        assert_eq!(labels, vec![0.0, 0.0, 1.0, 1.0]);
        for (id, s) in ds.iter() {
            assert_eq!(id.starts_with("rainy/"), s.label == LabeledSample::RAINY);
        }
    }

    #[test]
    fn balance_oversamples_minority() {
        let root = tempfile::tempdir().unwrap();
        let rainy = root.path().join("rainy");
        let clear = root.path().join("clear");
        write(&rainy, "a.png", 0.2);
        for i in 0..3 {
            write(&clear, &format!("c{i}.png"), 0.6);
        }
        let mut spec = DatasetSpec::recognition(&rainy, &clear, 1);
        spec.balance = true;
        let ds = build_dataset(&spec).unwrap().into_labeled().unwrap();
        let rainy_count = ds.samples.iter().filter(|s| s.label == 0.0).count();
        assert_eq!((rainy_count, ds.len()), (3, 6));
    }

    #[test]
    fn reconstruction_inputs_are_blurred_targets() {
        let root = tempfile::tempdir().unwrap();
        let clear = root.path().join("clear");
        write(&clear, "a.png", 0.1);
        write(&clear, "b.png", 0.5);
        let ds = build_dataset(&DatasetSpec::reconstruction(&clear, 1.5, 0))
            .unwrap()
            .into_paired()
            .unwrap();
        for (id, pair) in ds.iter() {
            let source = load_image(clear.join(id)).unwrap();
            assert_eq!(pair.target(), &source);
            assert_eq!(pair.input(), &gaussian_blur(&source, 1.5, DEFAULT_BLUR_RADIUS).unwrap());
        }
    }

    #[test]
    fn finetune_orphan_is_named() {
        let root = tempfile::tempdir().unwrap();
        let input = root.path().join("input");
        let gt = root.path().join("gt");
        write(&input, "x.png", 0.4);
        write(&input, "lonely.png", 0.4);
        write(&gt, "x.png", 0.5);
        let err = build_dataset(&DatasetSpec::finetune(&input, &gt, 0)).unwrap_err();
        assert!(matches!(err, ImageDataError::Config(_)));
        assert!(err.to_string().contains("lonely.png"), "{err}");
    }

    #[test]
    fn empty_directory_is_config_error() {
        let root = tempfile::tempdir().unwrap();
        let empty = root.path().join("empty");
        std::fs::create_dir_all(&empty).unwrap();
        let err = build_dataset(&DatasetSpec::distillation(&empty, 0)).unwrap_err();
        assert!(matches!(err, ImageDataError::Config(_)));
    }

    #[test]
    fn blur_sigma_required_only_for_reconstruction() {
        let mut spec = DatasetSpec::reconstruction("x", 1.0, 0);
        spec.blur_sigma = None;
        assert!(build_dataset(&spec).is_err());
        let mut spec = DatasetSpec::distillation("x", 0);
        spec.blur_sigma = Some(1.0);
        assert!(matches!(build_dataset(&spec), Err(ImageDataError::Config(_))));
    }

    #[test]
    fn builds_are_reproducible_and_in_range() {
        let root = tempfile::tempdir().unwrap();
        let rainy = root.path().join("rainy");
        let clear = root.path().join("clear");
        let input = root.path().join("input");
        let gt = root.path().join("gt");
        for i in 0..5 {
            write(&rainy, &format!("r{i}.png"), 0.1 * i as f32);
            write(&clear, &format!("c{i}.png"), 0.15 * i as f32);
            write(&input, &format!("p{i}.png"), 0.2 * i as f32);
            write(&gt, &format!("p{i}.png"), 0.1 + 0.1 * i as f32);
        }
        let specs = [
            DatasetSpec::recognition(&rainy, &clear, 11),
            DatasetSpec::reconstruction(&clear, 1.5, 11),
            DatasetSpec::distillation(&rainy, 11),
            DatasetSpec::finetune(&input, &gt, 11),
        ];
        for spec in &specs {
            let a = build_dataset(spec).unwrap();
            let b = build_dataset(spec).unwrap();
            let images = |d: &AnyDataset| -> Vec<(String, Vec<f32>)> {
                match d {
                    AnyDataset::Recognition(d) => d
                        .iter()
                        .map(|(id, s)| (id.to_string(), s.image.data().to_vec()))
                        .collect(),
                    AnyDataset::Reconstruction(d) | AnyDataset::Finetune(d) => d
                        .iter()
                        .map(|(id, s)| {
                            let mut v = s.input().data().to_vec();
                            v.extend_from_slice(s.target().data());
                            (id.to_string(), v)
                        })
                        .collect(),
                    AnyDataset::Distillation(d) => {
                        d.iter().map(|(id, s)| (id.to_string(), s.data().to_vec())).collect()
                    }
                }
            };
            let (ia, ib) = (images(&a), images(&b));
            assert_eq!(ia, ib);
            assert!(ia.iter().all(|(_, v)| v.iter().all(|x| (0.0..=1.0).contains(x))));
        }
    }

    #[test]
    fn sampler_visits_every_index_each_epoch() {
        let mut s = BatchSampler::new(7, 3);
        for _ in 0..3 {
            let mut epoch = s.next_batch(7);
            epoch.sort_unstable();
            assert_eq!(epoch, (0..7).collect::<Vec<_>>());
        }
    }
}
