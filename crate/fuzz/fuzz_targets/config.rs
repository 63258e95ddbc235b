//! Run configuration parser: arbitrary text must parse or fail cleanly, and
//! accepted configs must survive a serialize/parse round trip.

#![no_main]

use libfuzzer_sys::fuzz_target;
use nearopt::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(cfg) = RunConfig::from_toml_str(text) else {
        return;
    };
    if let Ok(spec) = cfg.build_spec() {
        let _ = cfg.time_grid(&spec);
    }
    // Compare serialized forms so NaN parameters do not break equality.
    let once = toml::to_string(&cfg).expect("serialize accepted config");
    let again = RunConfig::from_toml_str(&once).expect("reparse serialized config");
    assert_eq!(once, toml::to_string(&again).unwrap());
});
