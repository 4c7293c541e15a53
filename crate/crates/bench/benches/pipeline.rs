use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use boicr::data::generate;
use boicr::eval::evaluate;
use boicr::geometry::{iou, nms};
use boicr::refine::build_supervision;
use boicr::trainer::{infer_all, train};
use boicr::{ApMethod, Detection, HeadSelection, ImageSample, Model, SceneSpec, TrainConfig};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn benchmark_data(images: usize) -> (Vec<ImageSample>, Vec<ImageSample>) {
    generate(&SceneSpec { images_train: images, images_test: images, ..SceneSpec::benchmark() }).unwrap()
}

fn geometry(c: &mut Criterion) {
    let (train_set, _) = benchmark_data(4);
    let boxes = &train_set[0].proposals;
    c.bench_function("iou all pairs", |b| {
        b.iter(|| {
            let mut acc = 0.0;
            for a in boxes {
                for o in boxes {
                    acc += iou(a, o);
                }
            }
            black_box(acc)
        })
    });
    let dets: Vec<Detection> = boxes
        .iter()
        .enumerate()
        .map(|(i, &bbox)| Detection { bbox, class_id: 1 + i % 3, score: ((i * 37) % 101) as f64 / 101.0 })
        .collect();
    c.bench_function("nms per class", |b| b.iter(|| black_box(nms(black_box(&dets), 0.3))));
}

fn model(c: &mut Criterion) {
    let (train_set, _) = benchmark_data(4);
    let sample = &train_set[0];
    let config = TrainConfig::default();
    let mut model = Model::from_config(&config, &mut ChaCha8Rng::seed_from_u64(0));
    let schedule = config.schedule().unwrap();
    let (lam, ign) = (schedule.lambda_at(500).unwrap(), schedule.lambda_ign_at(500).unwrap());

    c.bench_function("forward one image", |b| b.iter(|| black_box(model.apply(&sample.features).unwrap())));
    let out = model.apply(&sample.features).unwrap();
    c.bench_function("build_supervision", |b| {
        b.iter(|| {
            black_box(build_supervision(&out.midn.x_r, &sample.proposals, &sample.labels, lam, ign, true).unwrap())
        })
    });
    c.bench_function("forward + backward one image", |b| {
        b.iter(|| {
            model.zero_grad();
            let out = model.forward(&sample.features).unwrap();
            let sup = Model::mine_supervision(&out, &sample.proposals, &sample.labels, lam, ign, true).unwrap();
            model.backward(&sample.labels, &out, &sup, 1.0).unwrap();
        })
    });
}

fn training_and_eval(c: &mut Criterion) {
    let (train_set, test_set) = benchmark_data(40);
    let config = TrainConfig { total_steps: 50, lr_schedule: vec![(0, 0.01)], ..TrainConfig::default() };
    let mut group = c.benchmark_group("end to end");
    group.sample_size(10);
    group.bench_function("train 50 steps", |b| b.iter(|| black_box(train(&train_set, &config).unwrap())));
    let model = train(&train_set, &config).unwrap().checkpoint.model().unwrap();
    let dets = infer_all(&test_set, &model, HeadSelection::default(), 0.3).unwrap();
    group.bench_function("infer 40 images", |b| {
        b.iter(|| black_box(infer_all(&test_set, &model, HeadSelection::default(), 0.3).unwrap()))
    });
    group.bench_function("evaluate 40 images", |b| {
        b.iter(|| black_box(evaluate(&test_set, &dets, 5, ApMethod::ElevenPoint).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, geometry, model, training_and_eval);
criterion_main!(benches);
