//! Binary noise decoder. Headers claiming huge bundles must be rejected
//! before allocation; accepted inputs re-encode to the same bytes.

#![no_main]

use libfuzzer_sys::fuzz_target;
use nearopt::paths::NoiseBundle;

fuzz_target!(|data: &[u8]| {
    if let Ok(bundle) = NoiseBundle::from_binary(data) {
        assert_eq!(bundle.to_binary(), data);
    }
});
