use vulgnn::codetok::{fit_window, load_vocabulary, VocabOptions};
use vulgnn::graph_ir::{parse_cpg_export, validate_graph, EdgeRecord, TypeRegistry};

const VOCAB: &[u8] = include_bytes!("fixtures/toy-vocab.json");
const MERGES: &[u8] = include_bytes!("fixtures/toy-merges.txt");
const REFERENCE: &str = include_str!("fixtures/toy_reference.json");

#[test]
fn if_statement_fixture() {
    let reg = TypeRegistry::default();
    let g = parse_cpg_export(include_bytes!("fixtures/if_statement.json"), &reg).unwrap();
    assert!(validate_graph(&g).is_empty());
    assert_eq!(g.nodes.len(), 5);
    assert_eq!(g.edges.len(), 5);
    assert_eq!(g.label, 1);
    let kinds: Vec<u16> = g.nodes.iter().map(|n| n.kind).collect();
    // METHOD, CONTROL_STRUCTURE, CALL, IDENTIFIER, RETURN
    assert_eq!(kinds, vec![27, 12, 8, 17, 35]);
    let ids: Vec<u64> = g.nodes.iter().map(|n| n.id).collect();
    assert_eq!(ids, vec![0, 1, 2, 3, 4]);
    let expect = [(0, 1, 3), (1, 2, 3), (2, 3, 3), (1, 4, 3), (2, 4, 9)];
    for (e, &(s, d, r)) in g.edges.iter().zip(&expect) {
        assert_eq!((e.src, e.dst, e.relation), (s, d, r));
    }
    assert_eq!(
        g.edges[4],
        EdgeRecord { src: 2, dst: 4, relation: 9, attr: "x".into() }
    );
}

/// Encodings frozen from the `tokenizers` reference implementation run once
/// on the bundled byte-level vocabulary.
#[test]
fn encode_matches_reference_tokenizer() {
    let opts = VocabOptions { allow_size_mismatch: true, ..Default::default() };
    let vocab = load_vocabulary(VOCAB, MERGES, &opts).unwrap();
    assert_eq!(vocab.size(), 370);
    assert_eq!(vocab.pad_id(), 0);
    let cases: Vec<serde_json::Value> = serde_json::from_str(REFERENCE).unwrap();
    for case in cases {
        let text = case["text"].as_str().unwrap();
        let expect: Vec<u32> = case["ids"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_u64().unwrap() as u32)
            .collect();
        assert_eq!(vocab.encode(text), expect, "text {text:?}");
    }
    assert_eq!(vocab.encode("int x = 0;"), vec![260, 271, 264, 268, 27]);
    let w = fit_window(&vocab.encode("int x = 0;"), 8, vocab.pad_id());
    assert_eq!(w.ids, vec![260, 271, 264, 268, 27, 0, 0, 0]);
    assert_eq!(w.n_real, 5);
}
