use xdr_core::data::{load_dataset, DatasetSpec, PhantomFamily, Split};
use xdr_core::model::checkpoint::CascadeCheckpoint;
use xdr_core::model::{loss, CascadeConfig, CascadeModel};
use xdr_core::train::{evaluate_samples, mask_for_sample, prepare, train_with_log, TrainConfig};

fn config(dir: Option<&std::path::Path>, epochs: usize) -> TrainConfig {
    let mut dataset = DatasetSpec::phantom("E", PhantomFamily::Ellipses, 20, 5, [32, 32]);
    dataset.split_fractions = [0.6, 0.2, 0.2];
    TrainConfig {
        epochs,
        learning_rate: 3e-3,
        checkpoint_dir: dir.map(|d| d.to_path_buf()),
        ..TrainConfig::new(
            dataset,
            CascadeConfig {
                n_cascades: 2,
                n_conv_per_block: 3,
                n_filters: 8,
                ..CascadeConfig::default()
            },
        )
    }
}

#[test]
fn epoch_zero_loss_is_zero_filled_loss() {
    let cfg = config(None, 1);
    let out = train_with_log(&cfg).unwrap();
    let (slices, _) = load_dataset(&cfg.dataset.with_split(Split::Train)).unwrap();
    let mut total = 0.0;
    for (i, s) in slices.iter().enumerate() {
        let mask = mask_for_sample(&cfg.mask, cfg.mask_policy, cfg.seed, Split::Train, i, (32, 32)).unwrap();
        let p = prepare(s, &mask).unwrap();
        total += loss(&p.zero_filled, &p.gt).unwrap();
    }
    let expected = total / slices.len() as f64;
    let logged = &out.log[0];
    assert_eq!((logged.epoch, logged.split.as_str()), (0, "train"));
    assert!(
        (logged.loss - expected).abs() <= 1e-4,
        "{} vs {expected}",
        logged.loss
    );
}

#[test]
fn training_lowers_loss_and_checkpoints_reload() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(Some(dir.path()), 4);
    let out = train_with_log(&cfg).unwrap();
    let train: Vec<f64> = out
        .log
        .iter()
        .filter(|r| r.split == "train")
        .map(|r| r.loss)
        .collect();
    assert!(train.last() < train.first(), "{train:?}");

    let best = CascadeCheckpoint::load(&dir.path().join("best.ckpt")).unwrap();
    assert_eq!(best, out.best_checkpoint);
    let epoch = best.training_meta.epoch;
    let logged = out
        .log
        .iter()
        .find(|r| r.split == "val" && r.epoch == epoch)
        .unwrap();

    let (slices, _) = load_dataset(&cfg.dataset.with_split(Split::Val)).unwrap();
    let samples: Vec<_> = slices
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let m = mask_for_sample(&cfg.mask, cfg.mask_policy, cfg.seed, Split::Val, i, (32, 32)).unwrap();
            prepare(s, &m).unwrap()
        })
        .collect();
    let (val_loss, val_psnr) = evaluate_samples(&best.model().unwrap(), &samples).unwrap();
    assert!((val_loss - logged.loss).abs() <= 1e-5);
    assert_eq!(val_psnr, logged.psnr);
    assert_eq!(Some(val_psnr), best.training_meta.best_val_psnr);

    let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), out.log.len());
    assert!(log
        .lines()
        .next()
        .unwrap()
        .starts_with("{\"epoch\":0,\"split\":\"train\",\"loss\":"));
}

#[test]
fn fresh_checkpoint_reconstructs_zero_filled() {
    let model = CascadeModel::init(config(None, 1).cascade, 1).unwrap();
    let ckpt = CascadeCheckpoint::from_model(&model, Default::default());
    let slice = xdr_core::data::phantom_slice(&config(None, 1).dataset, 3).unwrap();
    let mask = xdr_core::generate_mask(32, 32, &Default::default()).unwrap();
    let out = xdr_core::train::reconstruct(&ckpt, &slice.image.scaled(3.0), &mask).unwrap();
    let (_, zf) = xdr_core::undersample(&slice.image.scaled(3.0), &mask).unwrap();
    assert!(out.sub(&zf).unwrap().max_abs() < 1e-5);
}
