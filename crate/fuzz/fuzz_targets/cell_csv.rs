#![no_main]

use higine::cell_table::{parse_cell_table, CellColumns, CohortConfig, OneHotColumn};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let mut config = CohortConfig::new(1730.0);
    config.cell_columns = CellColumns {
        tissue_category: Some("tissue".into()),
        features: vec!["m1".into(), "m2".into()],
        one_hot: Some(OneHotColumn {
            column: "kind".into(),
            levels: vec!["a".into(), "b".into()],
        }),
        ..CellColumns::default()
    };
    if let Ok(cores) = parse_cell_table(data, &config) {
        for core in &cores {
            assert!(!core.cells.is_empty());
            for cell in &core.cells {
                assert!(cell.x_um.is_finite() && cell.y_um.is_finite());
                assert_eq!(cell.features.len(), config.feature_dim());
            }
        }
    }
});
