use dit_compress::metrics::{similarity_report, SimilarityMode};
use dit_compress::model::{sample, ModelConfig, StepTrace, ToyDit};
use dit_compress::plan_search::{CompressionPlan, LayerOp};
use dit_compress::sharing::CacheState;

fn cfg(steps: usize) -> ModelConfig {
    ModelConfig {
        num_steps: steps,
        seq_len: 24,
        window: 4,
        ..ModelConfig::small()
    }
}

fn traces(cfg: &ModelConfig) -> Vec<StepTrace> {
    let model = ToyDit::new(cfg).unwrap();
    sample(&model, cfg, &CompressionPlan::full_for(cfg), 0, true)
        .unwrap()
        .traces
        .unwrap()
}

#[test]
fn step_wise_matrix_is_symmetric_with_unit_diagonal() {
    let c = cfg(6);
    let reports = similarity_report(&traces(&c), SimilarityMode::StepWise).unwrap();
    assert_eq!(reports.len(), c.num_layers);
    for m in &reports {
        assert_eq!((m.rows, m.cols()), (6, 6));
        for i in 0..6 {
            assert!((m.get(i, i) - 1.0).abs() <= 1e-6);
            for j in 0..6 {
                assert_eq!(m.get(i, j), m.get(j, i));
                assert!((-1.0..=1.0).contains(&m.get(i, j)));
            }
        }
    }
}

#[test]
fn single_step_gives_unit_matrix() {
    let m = &similarity_report(&traces(&cfg(1)), SimilarityMode::StepWise).unwrap()[0];
    assert_eq!(m.values, vec![1.0]);
    assert_eq!(m.to_csv().unwrap(), "0\n1.000000\n");
}

#[test]
fn identical_evaluations_are_fully_similar() {
    let c = cfg(5);
    let mut model = ToyDit::new(&c).unwrap();
    model.clear_time_embedding();
    let ops = vec![[LayerOp::FULL; 2]; c.num_layers];
    let x = model.initial_latent();
    let mut traces = Vec::new();
    for t in 0..c.num_steps {
        let mut cache = CacheState::new(c.num_layers);
        model
            .step(
                &x,
                t,
                3,
                &ops,
                &mut cache,
                c.guidance_scale,
                Some(&mut traces),
            )
            .unwrap();
    }
    for m in similarity_report(&traces, SimilarityMode::StepWise).unwrap() {
        for v in m.values {
            assert!((v - 1.0).abs() <= 1e-6);
        }
    }
}

#[test]
fn cfg_wise_report_is_one_row() {
    let c = cfg(4);
    let reports = similarity_report(&traces(&c), SimilarityMode::CfgWise).unwrap();
    for m in &reports {
        assert_eq!((m.rows, m.cols()), (1, 4));
        assert!(m.values.iter().all(|v| (-1.0..=1.0).contains(v)));
        let csv = m.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.starts_with("0,1,2,3\n"));
    }
}
