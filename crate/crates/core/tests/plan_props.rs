mod support;

use breachgraph_core::phase_pipeline::{PhaseName, PhaseSpec};
use breachgraph_core::plan_sessions::{
    parse_plan_text, serialize_plan, PhaseContext, PlanError, PlanFeedback, Planner, PlannerSettings, PromptLibrary,
};
use breachgraph_core::task_graph::PenetrationTaskGraph;
use proptest::prelude::*;
use support::{adversarial_completion, merge_oracle, random_dag, random_executed_tasks, rng, wrap, Queue};

fn recon() -> PhaseSpec {
    PhaseSpec::standard(PhaseName::Reconnaissance, 5)
}

#[test]
fn planner_never_accepts_an_invalid_plan() {
    let mut r = rng(0xadd);
    let (mut accepted, mut exhausted) = (0, 0);
    let prompts = PromptLibrary::default();
    let settings = PlannerSettings::default();
    let phase = recon();
    let ctx = PhaseContext { phase: &phase, target_description: "10.0.0.5", prior_context: "" };
    for case in 0..100 {
        let completions: Vec<(String, Option<PenetrationTaskGraph>)> =
            (0..3).map(|_| adversarial_completion(&mut r)).collect();
        let first_good = completions.iter().position(|(_, g)| g.is_some());
        let backend = Queue::new(completions.iter().map(|(c, _)| c.clone()));
        let outcome = Planner::new(&backend, &prompts, &settings).generate_plan(&ctx, &[]);
        match (first_good, outcome) {
            (Some(i), Ok(plan)) => {
                assert_eq!(plan.attempts as usize, i + 1, "case {case}");
                assert_eq!(plan.rejected.len(), i);
                assert_eq!(Some(plan.graph), completions[i].1.clone(), "case {case}");
                accepted += 1;
            }
            (None, Err(PlanError::GenerationFailed { attempts, .. })) => {
                assert_eq!(attempts, 3);
                assert_eq!(backend.calls(), 3);
                exhausted += 1;
            }
            (expected, got) => panic!("case {case}: expected first valid {expected:?}, got {got:?}\n{completions:#?}"),
        }
    }
    assert!(accepted > 20 && exhausted > 5, "{accepted} accepted / {exhausted} exhausted");
}

#[test]
fn replan_cycles_follow_the_reference_merge() {
    let mut r = rng(0x4e9);
    let prompts = PromptLibrary::default();
    let settings = PlannerSettings::default();
    let phase = recon();
    let ctx = PhaseContext { phase: &phase, target_description: "10.0.0.5", prior_context: "" };
    let mut cycles = 0;
    while cycles < 200 {
        let old = random_executed_tasks(&mut r, 8);
        let graph = PenetrationTaskGraph::from_nodes(old.clone()).unwrap();
        if !graph.has_finished_tasks() {
            continue;
        }
        let new = random_dag(&mut r, 8, 0.3, true);
        let backend = Queue::new([wrap(&mut r, &serialize_plan(&new))]);
        let feedback = PlanFeedback::from_graph(&graph, &phase.goal, &Default::default());
        let outcome = Planner::new(&backend, &prompts, &settings)
            .update_plan(&ctx, &graph, &feedback, &[])
            .unwrap();
        assert_eq!(outcome.graph.into_nodes(), merge_oracle(&new, &old), "cycle {cycles}");
        assert_eq!(backend.calls(), 1);
        cycles += 1;
    }
}

proptest! {
    #[test]
    fn serialized_plans_parse_back(seed in any::<u64>(), wrapper in 0u64..4) {
        let mut r = rng(seed);
        let drafts = random_dag(&mut r, 10, 0.3, true);
        let text = wrap(&mut rng(wrapper), &serialize_plan(&drafts));
        let parsed = parse_plan_text(&text).unwrap();
        prop_assert!(parsed.warnings.is_empty());
        prop_assert_eq!(parsed.drafts, drafts);
    }

    #[test]
    fn parser_never_panics(text in ".{0,200}") {
        let _ = parse_plan_text(&text);
    }
}
