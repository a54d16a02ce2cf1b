mod common;

use common::invariants::*;

macro_rules! property {
    ($($name:ident),* $(,)?) => {
        $(
            #[test]
            fn $name() {
                if let Err(e) = super::$name() {
                    panic!("{e}");
                }
            }
        )*
    };
}

mod props {
    property!(
        weights_normalized,
        ess_bounds,
        resampling_support,
        softmax_contract,
        attention_contract,
        patchify_round_trip,
        tensor_file_round_trip,
        checkpoint_round_trip,
        rmse_properties,
        quantile_properties,
        wasserstein_metric_axioms,
    );
}
