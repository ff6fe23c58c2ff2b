//! Per-thread cache of gather maps keyed by shape, so repeated forward passes
//! over same-size inputs reuse index tables.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

type Key = (&'static str, Vec<usize>);

thread_local! {
    static CACHE: RefCell<HashMap<Key, Rc<[u32]>>> = RefCell::new(HashMap::new());
}

pub(crate) fn cached(kind: &'static str, params: &[usize], build: impl FnOnce() -> Vec<u32>) -> Rc<[u32]> {
    let key = (kind, params.to_vec());
    if let Some(m) = CACHE.with(|c| c.borrow().get(&key).cloned()) {
        return m;
    }
    let map: Rc<[u32]> = build().into();
    CACHE.with(|c| c.borrow_mut().insert(key, map.clone()));
    map
}
