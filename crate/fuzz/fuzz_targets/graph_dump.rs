#![no_main]

use higine::graph_builder::{decode_graphs, encode_graphs};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(graphs) = decode_graphs(data) {
        for g in &graphs {
            assert!(g.graph.validate().is_ok());
        }
        assert_eq!(decode_graphs(&encode_graphs(&graphs)).expect("round trip"), graphs);
    }
});
