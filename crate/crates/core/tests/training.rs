use ndarray::Array2;
use priorseg_core::data_io::{generate_cohort, prepare_slices, split_dataset, PhantomSpec, SliceSample};
use priorseg_core::evaluation::{evaluate, SlicePredictor};
use priorseg_core::model::{Checkpoint, Model, ModelConfig, Parameterized};
use priorseg_core::training::{batch_gradient, make_batch, train, train_step, Adam, TrainConfig};
use priorseg_core::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn slices(cases: usize, size: usize, per_case: usize, seed: u64) -> Vec<SliceSample> {
    let spec = PhantomSpec {
        slices: per_case,
        ..PhantomSpec::for_size(size)
    };
    prepare_slices(&generate_cohort(&spec, cases, seed).unwrap()).unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        epochs: 1,
        lr_start: 1e-3,
        lr_end: 1e-3,
        seed: 3,
        model: ModelConfig {
            weight_channels: 2,
            ..ModelConfig::small(2, 4)
        },
        ..TrainConfig::default()
    }
}

#[test]
fn one_step_reduces_batch_loss() {
    let data = slices(2, 32, 4, 1);
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = make_batch(&data, &cfg, &mut rng).unwrap();
    let mut model = Model::new(cfg.model.clone(), cfg.seed).unwrap();
    let mut opt = Adam::new(model.num_parameters());
    let before = train_step(&mut model, &batch, &mut opt, &cfg, 1e-3).unwrap();
    let (after, _) = batch_gradient(&model, &batch, &cfg).unwrap();
    assert!(after.total < before.total, "{} -> {}", before.total, after.total);
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let data = slices(2, 32, 4, 2);
    let cfg = small_config();
    let batch = make_batch(&data, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut model = Model::new(cfg.model.clone(), 0).unwrap();
    let before = model.flatten();
    let mut opt = Adam::new(model.num_parameters());
    train_step(&mut model, &batch, &mut opt, &cfg, 0.0).unwrap();
    assert_eq!(model.flatten(), before);
}

#[test]
fn mixup_probability_extremes() {
    let data = slices(3, 32, 4, 3);
    let mut cfg = small_config();
    cfg.batch_size = 16;
    cfg.mixup_probability = 0.0;
    let b = make_batch(&data, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert!(b.iter().all(|i| i.lambda.is_none()));
    cfg.mixup_probability = 1.0;
    let b = make_batch(&data, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    // Slices without foreground cannot be mixed; every other one is.
    for item in &b {
        let has_foreground = item.target.argmax().iter().any(|&l| l != 0);
        assert_eq!(item.lambda.is_some(), has_foreground);
    }
}

#[test]
fn batches_replay_from_the_same_seed() {
    let data = slices(3, 32, 4, 4);
    let cfg = small_config();
    let a = make_batch(&data, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = make_batch(&data, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.image, y.image);
        assert_eq!(x.target.values(), y.target.values());
        assert_eq!(x.lambda, y.lambda);
    }
}

#[test]
fn one_epoch_covers_the_training_set() {
    let data = slices(8, 32, 4, 5);
    assert_eq!(data.len(), 32);
    let manifest = split_dataset(&data, 0.999, 5).unwrap();
    let n_train = manifest.train.len();
    let mut cfg = small_config();
    cfg.batch_size = 16;
    let out = train(&cfg, &data, &manifest, None, None).unwrap();
    assert_eq!(out.logs.len(), 1);
    assert_eq!(out.logs[0].steps, n_train.div_ceil(16));
}

#[test]
fn loss_decreases_over_epochs() {
    let data = slices(4, 32, 4, 6);
    let manifest = split_dataset(&data, 0.75, 6).unwrap();
    let mut cfg = small_config();
    cfg.epochs = 10;
    cfg.batch_size = 2;
    cfg.use_awce = false;
    cfg.lr_end = 1e-4;
    let out = train(&cfg, &data, &manifest, None, None).unwrap();
    let first = out.logs.first().unwrap().losses.total;
    let last = out.logs.last().unwrap().losses.total;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let data = slices(2, 32, 4, 7);
    let manifest = split_dataset(&data, 0.75, 7).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = train(&small_config(), &data, &manifest, Some(dir.path()), None).unwrap();
    let loaded = Checkpoint::load(&dir.path().join("ckpt_epoch_1")).unwrap();
    for s in &data {
        let a = out.final_checkpoint.model.segmentation_forward(s.image.view()).unwrap();
        let b = loaded.model.segmentation_forward(s.image.view()).unwrap();
        assert_eq!(a.probabilities.values(), b.probabilities.values());
    }
}

struct Oracle;

impl SlicePredictor for Oracle {
    fn predict(&self, slice: &SliceSample) -> Result<Array2<u8>> {
        Ok(slice.labels.clone())
    }
}

struct Background;

impl SlicePredictor for Background {
    fn predict(&self, slice: &SliceSample) -> Result<Array2<u8>> {
        Ok(Array2::zeros(slice.labels.dim()))
    }
}

#[test]
fn oracle_and_background_predictors() {
    let data = slices(3, 32, 4, 8);
    let refs: Vec<&SliceSample> = data.iter().collect();
    let r = evaluate(&Oracle, &refs, "oracle").unwrap();
    for c in &r.classes {
        assert_eq!(c.mean, Some(1.0), "{}", c.name);
        assert_eq!(c.std, Some(0.0));
    }
    let r = evaluate(&Background, &refs, "background").unwrap();
    assert_eq!(r.mean_of(1), Some(0.0));
    assert!(evaluate(&Oracle, &[], "empty").is_err());
}
