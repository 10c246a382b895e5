#![no_main]

use libfuzzer_sys::fuzz_target;
use splatpose::tensor::container::Container;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Container::from_bytes(data) {
        let bytes = c.to_bytes().expect("accepted container re-encodes");
        let again = Container::from_bytes(&bytes).expect("re-encoded container decodes");
        assert_eq!(again.tensors.len(), c.tensors.len());
        for ((na, ta), (nb, tb)) in again.tensors.iter().zip(&c.tensors) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            let same = ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same, "tensor `{na}` changed in a round trip");
        }
    }
});
