//! Hot loops that fan out through `par`. Run once with default features and
//! once with `--no-default-features`; the group names carry the mode, so
//! criterion reports both side by side.

use std::collections::HashSet;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use refgame_core::config::desk_listener;
use refgame_core::context::{build_knn_graph, EmbeddingIndex};
use refgame_core::corpus::{make_split, prepare, Example, SplitMode, MAX_UTTERANCE_LEN};
use refgame_core::evaluation::CandidatePools;
use refgame_core::listener::{train_listener, Listener};
use refgame_core::nn::Mat;
use refgame_core::par;
use refgame_core::speaker::{Speaker, SpeakerConfig, SpeakerDims};
use refgame_core::synthetic::{SyntheticWorld, WorldConfig};

fn mode() -> &'static str {
    if par::is_parallel() {
        "parallel"
    } else {
        "sequential"
    }
}

struct Fixture {
    world: SyntheticWorld,
    train: Vec<Example>,
    test: Vec<Example>,
    listener: Listener,
    speaker: Speaker,
    vocab: usize,
}

fn fixture() -> Fixture {
    let world = SyntheticWorld::generate(WorldConfig { objects: 120, seed: 3, ..WorldConfig::default() }).unwrap();
    let split = make_split(&world.trials, SplitMode::ObjectGeneralization, [0.8, 0.1, 0.1], 3).unwrap();
    let prep = prepare(&world.trials, &split, 1, MAX_UTTERANCE_LEN);
    let part = |idx: &[usize]| {
        let s: HashSet<usize> = idx.iter().copied().collect();
        prep.examples.iter().filter(|e| s.contains(&e.trial)).cloned().collect::<Vec<_>>()
    };
    let (train, test) = (part(&split.train), part(&split.test));
    let config = refgame_core::listener::ListenerConfig { max_epochs: 1, ..desk_listener(3) };
    let (listener, _) = train_listener(&config, &train, &[], &world.objects, prep.vocab.len(), None).unwrap();
    let sc = SpeakerConfig { lstm_hidden: 32, projection_dim: 16, ..SpeakerConfig::for_modality(refgame_core::encoders::Modality::Image) };
    let image = world.objects.values().next().unwrap().image_code.as_ref().unwrap().len();
    let speaker = Speaker::new(sc, SpeakerDims { vocab: prep.vocab.len(), image, cloud: 0 }, Some(prep.vocab.counts())).unwrap();
    Fixture { world, train, test, listener, speaker, vocab: prep.vocab.len() }
}

fn benches(c: &mut Criterion) {
    let f = fixture();
    let mut group = c.benchmark_group(mode());
    group.sample_size(10);

    group.bench_function("listener_accuracy", |b| b.iter(|| black_box(f.listener.accuracy(&f.train, &f.world.objects).unwrap())));

    group.bench_function("listener_epoch", |b| {
        let config = refgame_core::listener::ListenerConfig { max_epochs: 1, ..desk_listener(5) };
        b.iter(|| black_box(train_listener(&config, &f.test, &[], &f.world.objects, f.vocab, None).unwrap().0))
    });

    group.bench_function("candidate_pools", |b| {
        let contexts = &f.test[..f.test.len().min(30)];
        b.iter(|| black_box(CandidatePools::build(&f.speaker, &f.listener, &f.listener, contexts, &f.world.objects, 10, 1).unwrap()))
    });

    let n = 600;
    let mut codes = Mat::zeros(n, 16);
    let mut rng = refgame_core::util::rng(9);
    for i in 0..n {
        for j in 0..16 {
            codes.set(i, j, rand::Rng::random::<f64>(&mut rng));
        }
    }
    let index = EmbeddingIndex::new((0..n).map(|i| format!("o{i}")).collect(), codes).unwrap();
    group.bench_function("knn_graph", |b| b.iter(|| black_box(build_knn_graph(&index, 2).unwrap())));
    group.finish();
}

criterion_group!(parallel, benches);
criterion_main!(parallel);
