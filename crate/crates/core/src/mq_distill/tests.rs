use rand::SeedableRng;

use super::*;
use crate::diffcore::grad_check_params;
use crate::ui2dprompt::PromptSource;

fn setup() -> (MimicPool, InjectionBlock, ParamStore<f64>) {
    let pool = MimicPool::new("mq", 4, 6);
    let block = InjectionBlock::new("inj", 6);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    pool.init(&mut store, &mut rng);
    block.init(&mut store, &mut rng).unwrap();
    (pool, block, store)
}

/// Teacher rows equal to `h(e_m)` at the aligned rows, plus `delta`.
fn teacher(pool: &MimicPool, store: &ParamStore<f64>, n: usize, delta: f64) -> PvPromptSet {
    let mut t = Tape::new();
    let p = store.view();
    let m = pool.mimic(&mut t, &p).unwrap();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| m.row(pool.row_for(i)).iter().map(|v| v + delta).collect()).collect();
    let points = DiffArray::from_rows(&rows).unwrap();
    PvPromptSet {
        instances: DiffArray::zeros(&[1, 6]),
        points,
        rows: vec![],
        source: PromptSource::Detections,
    }
}

#[test]
fn perfect_and_offset_mimic() {
    let (pool, _, store) = setup();
    let mut t = Tape::new();
    let p = store.view();
    let exact = pool.distill_loss(&mut t, &p, &teacher(&pool, &store, 7, 0.0), 10.0).unwrap();
    assert!(exact.item().abs() < 1e-24);
    let off = pool.distill_loss(&mut t, &p, &teacher(&pool, &store, 7, 0.3), 10.0).unwrap();
    assert!((off.item() - 10.0 * 0.09).abs() < 1e-12);
    let empty = pool.distill_loss(&mut t, &p, &PvPromptSet::empty(6), 10.0).unwrap();
    assert_eq!(empty.item(), 0.0);
}

#[test]
fn rows_wrap_around_the_pool() {
    let (pool, _, _) = setup();
    let rows: Vec<usize> = (0..10).map(|i| pool.row_for(i)).collect();
    assert_eq!(rows, vec![0, 1, 2, 3, 0, 1, 2, 3, 0, 1]);
}

#[test]
fn distill_gradient_matches_finite_differences() {
    let (pool, _, store) = setup();
    let target = teacher(&pool, &store, 9, 0.0);
    let shifted = PvPromptSet {
        points: target.points.map(|v| v * 1.3 - 0.2),
        ..target
    };
    let err = grad_check_params(&store, &["mq."], |t, p| pool.distill_loss(t, p, &shifted, 10.0), 1e-6, None, 1).unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn teacher_is_detached() {
    let (pool, block, store) = setup();
    let rig = crate::scenegen::standard_rig();
    let cam = &rig[0];
    let ground = [[-2.0, 9.0], [0.0, 11.0], [1.0, 13.0]];
    let inst = crate::ui2dprompt::PvInstance {
        camera: cam.name.clone(),
        scores: [0.9, 0.0, 0.0],
        points: ground.iter().map(|&g| cam.project_ground_point(g).0).collect(),
        sigmas: vec![[2.0, 1.0]; 3],
    };
    let layout = crate::ui2dprompt::prepare_prompts(&[inst], &rig, Default::default()).unwrap();
    assert_eq!(layout.rows.len(), 3);
    let mut t = Tape::new();
    let p = store.bind(&mut t);
    let prompts = block.build_prompts(&mut t, &p, &layout, Some(&pool)).unwrap();
    let l = pool.distill_loss(&mut t, &p, &prompts, 10.0).unwrap();
    let recorded = l.item();
    let g = t.backward(&l).unwrap();
    for (k, v) in p.gradients(&g) {
        let n: f64 = v.iter().map(|x| x.abs()).sum();
        if k.starts_with("inj.") {
            assert_eq!(n, 0.0, "{k} received teacher gradient");
        }
        if k.starts_with("mq.") {
            assert!(n > 0.0, "{k}");
        }
    }
    // perturbing prompt parameters after capture leaves the loss unchanged
    let mut moved = store.clone();
    for k in store.keys().filter(|k| k.starts_with("inj.")) {
        let v = moved.get(k).unwrap().map(|x| x + 0.5);
        moved.insert(k, v);
    }
    let mut t2 = Tape::new();
    let again = pool.distill_loss(&mut t2, &moved.view(), &prompts, 10.0).unwrap();
    assert_eq!(again.item(), recorded);
}

#[test]
fn mimic_prompt_set_shapes() {
    let (pool, block, store) = setup();
    let mut t = Tape::new();
    let set = pool.prompts(&mut t, &store.view(), &block).unwrap();
    assert_eq!(set.points.shape(), &[4, 6]);
    assert_eq!(set.instances.shape(), &[1, 6]);
    assert_eq!(set.source, PromptSource::Mimic);
    assert_eq!("mimic".parse::<InferenceMode>().unwrap(), InferenceMode::Mimic);
    assert!("fast".parse::<InferenceMode>().is_err());
}
