use std::ffi::CString;
use std::path::Path;

use protodetect::io::{fmap, protofile};
use protodetect::{ClassEntry, ClassRole, ClassTable, FeatureMap, PrototypeSet, Provenance};

/// Two classes along e0 and e1, one background row along e2. The left half
/// of a 4x4 grid is class 0, the top-right quarter class 1, the rest background.
pub fn write_inputs(dir: &Path) -> (CString, CString) {
    let mut data = Vec::new();
    for r in 0..4 {
        for c in 0..4 {
            let axis = if c < 2 {
                0
            } else if r < 2 {
                1
            } else {
                2
            };
            let mut v = [0.0f32; 3];
            v[axis] = 1.0;
            data.extend(v);
        }
    }
    let fm = FeatureMap::new(4, 4, 3, 10, 40, 40, data).unwrap();
    let fm_path = dir.join("img.fmap");
    fmap::write(&fm_path, &fm).unwrap();
    let table = ClassTable::new(
        vec![
            ClassEntry {
                name: "ship".into(),
                role: ClassRole::Novel,
            },
            ClassEntry {
                name: "plane".into(),
                role: ClassRole::Base,
            },
        ],
        1,
    )
    .unwrap();
    let rows = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
    let protos = PrototypeSet::from_rows(table, &rows, 0.1, Provenance::Averaged).unwrap();
    let p_path = dir.join("p.proto");
    protofile::write(&p_path, &protos).unwrap();
    (
        CString::new(fm_path.to_str().unwrap()).unwrap(),
        CString::new(p_path.to_str().unwrap()).unwrap(),
    )
}
