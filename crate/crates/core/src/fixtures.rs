//! Built-in fixtures: the tiny gradient-check instance and a synthetic
//! overfitting corpus. Used by the CLI and the acceptance suite.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::model::{self, Config, GraphContext, Mode, ModelError, ModelParams, TapeModel};
use crate::preprocess::{self, SummarizationInstance, Vocabularies, BOS, EOS};
use crate::sbt;
use crate::tensor::{self, Precision, Tape, TensorId};
use crate::train::TrainConfig;
use crate::uml::{GraphStore, Relation, UmlEdge, UmlGraph, UmlNode};

/// A four-node graph exercising all four relation kinds.
pub fn four_relation_graph() -> UmlGraph {
    let node = |id: u32, name: &str| UmlNode {
        id,
        name: name.to_string(),
        name_tokens: preprocess::normalize_class_name(name),
    };
    UmlGraph {
        nodes: vec![
            node(0, "StreamReader"),
            node(1, "BufferedStreamReader"),
            node(2, "FileSource"),
            node(3, "ByteCursor"),
        ],
        edges: vec![
            UmlEdge { src: 1, dst: 0, relation: Relation::Generalization },
            UmlEdge { src: 2, dst: 0, relation: Relation::Realization },
            UmlEdge { src: 0, dst: 3, relation: Relation::Association },
            UmlEdge { src: 3, dst: 2, relation: Relation::Dependency },
        ],
    }
}

/// Inputs for the default full-model gradient check: a tiny instance
/// over the four-relation graph.
pub struct GradcheckFixture {
    pub config: Config,
    pub graph: UmlGraph,
    pub class_node: u32,
    pub code_ids: Vec<usize>,
    pub sbt_ids: Vec<usize>,
    pub summary_ids: Vec<usize>,
}

pub fn gradcheck_fixture() -> GradcheckFixture {
    let config = Config {
        code_vocab_size: 14,
        sbt_vocab_size: 12,
        summary_vocab_size: 12,
        embed_dim: 4,
        gru_hidden: 6,
        class_embed_dim: 6,
        gnn_hidden: 4,
        gnn_layers: 2,
        dropout: 0.0,
        max_code_len: 16,
        max_sbt_len: 16,
        max_summary_len: 8,
        leaky_slope: 0.2,
        subgraph_radius: 2,
        precision: Precision::Double,
    };
    GradcheckFixture {
        config,
        graph: four_relation_graph(),
        class_node: 0,
        code_ids: vec![6, 7, 8, 9, 10, 11],
        sbt_ids: vec![6, 7, 8, 9, 10, 11, 6, 7, 8, 9],
        summary_ids: vec![6, 7, 8],
    }
}

pub struct GradcheckOutcome {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub analytic: f64,
    pub numeric: f64,
    pub parameter_values: usize,
}

/// Full-model gradient check on the built-in fixture: analytic
/// gradients against central finite differences, double precision.
pub fn run_gradcheck(seed: u64, eps: f64) -> Result<GradcheckOutcome, ModelError> {
    let fixture = gradcheck_fixture();
    let cfg = fixture.config.clone();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let params = ModelParams::init(&cfg, &mut rng);
    let gctx = GraphContext::build(
        &fixture.graph,
        fixture.class_node,
        cfg.subgraph_radius,
        |n| vec![6 + (n.id as usize % 6)],
        None,
    )?;

    let values: Vec<(Vec<usize>, Vec<f64>)> = params
        .set
        .entries
        .iter()
        .map(|e| (e.shape.clone(), e.data.clone()))
        .collect();
    let idx = params.idx.clone();
    let (code_ids, sbt_ids, summary_ids) =
        (fixture.code_ids, fixture.sbt_ids, fixture.summary_ids);
    let f = move |tape: &mut Tape, ids: &[TensorId]| -> Result<TensorId, ModelError> {
        let m = TapeModel::from_ids(&cfg, &idx, ids.to_vec());
        let ctx = model::encode(tape, &m, &code_ids, &sbt_ids, &gctx, &mut Mode::Eval)?;
        let (loss, _) =
            model::teacher_forced_loss(tape, &m, &ctx, &summary_ids, BOS, EOS, 1.0, &mut Mode::Eval)?;
        Ok(loss)
    };
    let analytic = tensor::analytic_gradient(&f, &values)?;
    let numeric = tensor::numeric_gradient(&f, &values, eps)?;
    let report = tensor::compare_gradients(&analytic, &numeric);
    Ok(GradcheckOutcome {
        max_rel_err: report.max_rel_err,
        worst_param: params.set.entries[report.param].name.clone(),
        analytic: report.analytic,
        numeric: report.numeric,
        parameter_values: params.set.total_values(),
    })
}

const KEYS: [&str; 20] = [
    "alpha", "bravo", "citrus", "delta", "ember", "falcon", "garnet", "harbor", "indigo",
    "juniper", "krypton", "lantern", "meadow", "nimbus", "onyx", "prism", "quartz", "ridge",
    "spruce", "timber",
];

/// Synthetic corpus of distinct method/summary pairs over the
/// four-relation graph, built through the real preprocessing path.
pub fn overfit_corpus(count: usize) -> (Vec<SummarizationInstance>, GraphStore) {
    assert!(count <= KEYS.len(), "at most {} synthetic pairs", KEYS.len());
    let graph = four_relation_graph();
    let mut store = GraphStore::default();
    store.insert("toy".to_string(), graph.clone());

    let mut instances = Vec::with_capacity(count);
    for (k, key) in KEYS.iter().take(count).enumerate() {
        let source = format!("int load_{key}() {{ return {key}Value + {k}; }}");
        let code_tokens = preprocess::preprocess_code(&preprocess::lex_code(&source));
        let mut ast = sbt::fallback_ast(&source);
        ast.lowercase_labels();
        let sbt_tokens = sbt::sbt_flatten(&ast);
        let summary = format!("returns the stored {key} value");
        let node = &graph.nodes[k % graph.nodes.len()];
        instances.push(SummarizationInstance {
            id: format!("m{k}"),
            code_tokens,
            sbt_tokens,
            class_name_tokens: node.name_tokens.clone(),
            summary_tokens: preprocess::preprocess_summary(&summary),
            uml_graph_id: "toy".to_string(),
            enclosing_class_node_id: node.id,
        });
    }
    (instances, store)
}

/// Vocabularies covering a whole instance corpus.
pub fn vocabs_for(instances: &[SummarizationInstance], cap: usize) -> Vocabularies {
    let code = preprocess::Vocab::build(
        instances.iter().map(|i| {
            i.code_tokens
                .iter()
                .chain(&i.class_name_tokens)
                .map(String::as_str)
        }),
        cap,
    )
    .expect("code vocab");
    let sbt = preprocess::Vocab::build(
        instances
            .iter()
            .map(|i| i.sbt_tokens.iter().map(String::as_str)),
        cap,
    )
    .expect("sbt vocab");
    let summary = preprocess::Vocab::build(
        instances
            .iter()
            .map(|i| i.summary_tokens.iter().map(String::as_str)),
        cap,
    )
    .expect("summary vocab");
    Vocabularies { code, sbt, summary }
}

/// Model dimensions for the overfitting harness: everything at 32,
/// dropout off, double precision.
pub fn overfit_config(vocabs: &Vocabularies) -> Config {
    Config {
        code_vocab_size: vocabs.code.len(),
        sbt_vocab_size: vocabs.sbt.len(),
        summary_vocab_size: vocabs.summary.len(),
        embed_dim: 32,
        gru_hidden: 32,
        class_embed_dim: 32,
        gnn_hidden: 32,
        gnn_layers: 2,
        dropout: 0.0,
        max_code_len: 40,
        max_sbt_len: 80,
        max_summary_len: 12,
        leaky_slope: 0.2,
        subgraph_radius: 2,
        precision: Precision::Double,
    }
}

/// Optimization settings for the overfitting harness: weight decay off
/// so a tiny corpus can actually be memorized.
pub fn overfit_train_config(max_epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.005,
        weight_decay: 0.0,
        batch_size: 4,
        max_epochs,
        seed,
        teacher_forcing: 1.0,
        grad_clip: 5.0,
    }
}
