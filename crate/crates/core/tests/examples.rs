//! Every example, compiled into the test binary and run once.

macro_rules! example {
    ($name:ident) => {
        mod $name {
            include!(concat!("../examples/", stringify!($name), ".rs"));
        }

        #[test]
        fn $name() {
            $name::main();
        }
    };
}

example!(stft_roundtrip);
example!(beam_patterns);
example!(room_simulation);
example!(oracle_enhancement);
example!(metrics);
example!(tensor_exchange);
example!(custom_provider);
