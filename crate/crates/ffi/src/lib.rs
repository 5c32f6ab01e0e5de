//! C interface to gognn.
//!
//! Every function returns a [`GognnStatus`]; on failure the message is
//! available from [`gognn_last_error`] on the same thread. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use gognn::checkpoint::{self, CheckpointError};
use gognn::chem::{parse_smiles, MoleculeGraph, FEATURE_DIM};
use gognn::data::{load_cci, load_ddi, split, DataError, Dataset, Split, Strictness, Task};
use gognn::interaction::Link;
use gognn::metrics::{ap, auc, RankedPredictions};
use gognn::model::GoGNNModel;
use gognn::train::{predict, TrainError};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GognnStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    ParseError = 3,
    IoError = 4,
    DataError = 5,
    CheckpointError = 6,
    MetricError = 7,
    Panic = 8,
}

/// Parsed molecule.
pub struct GognnMolecule {
    graph: MoleculeGraph,
}

/// Trained model bound to the dataset it was trained on.
pub struct GognnPredictor {
    model: GoGNNModel,
    dataset: Dataset,
    split: Split,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(GognnStatus, String);

type FfiResult<T = ()> = Result<T, Failure>;

fn fail<T>(status: GognnStatus, msg: impl Into<String>) -> FfiResult<T> {
    Err(Failure(status, msg.into()))
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> FfiResult) -> GognnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GognnStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("internal panic: {msg}"));
            GognnStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> FfiResult<()> {
    if p.is_null() {
        return fail(GognnStatus::NullArgument, format!("`{name}` is null"));
    }
    Ok(())
}

unsafe fn text<'a>(p: *const c_char, name: &str) -> FfiResult<&'a str> {
    non_null(p, name)?;
    CStr::from_ptr(p).to_str().or_else(|_| {
        fail(
            GognnStatus::InvalidArgument,
            format!("`{name}` is not UTF-8"),
        )
    })
}

unsafe fn slice<'a, T>(p: *const T, len: usize, name: &str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, name)?;
    Ok(std::slice::from_raw_parts(p, len))
}

fn data_failure(e: DataError) -> Failure {
    let status = match e {
        DataError::Io { .. } => GognnStatus::IoError,
        _ => GognnStatus::DataError,
    };
    Failure(status, e.to_string())
}

fn checkpoint_failure(e: CheckpointError) -> Failure {
    let status = match e {
        CheckpointError::Io { .. } => GognnStatus::IoError,
        _ => GognnStatus::CheckpointError,
    };
    Failure(status, e.to_string())
}

fn train_failure(e: TrainError) -> Failure {
    Failure(GognnStatus::DataError, e.to_string())
}

/// Message of the last failed call on this thread, or null if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn gognn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gognn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Width of one atom feature row.
#[no_mangle]
pub extern "C" fn gognn_feature_dim() -> usize {
    FEATURE_DIM
}

/// Parses a SMILES string into a new molecule handle.
///
/// # Safety
/// `smiles` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gognn_molecule_parse(
    smiles: *const c_char,
    out: *mut *mut GognnMolecule,
) -> GognnStatus {
    guard(|| {
        non_null(out, "out")?;
        let s = text(smiles, "smiles")?;
        let graph = parse_smiles(s).map_err(|e| Failure(GognnStatus::ParseError, e.to_string()))?;
        *out = Box::into_raw(Box::new(GognnMolecule { graph }));
        Ok(())
    })
}

/// # Safety
/// `mol` must come from [`gognn_molecule_parse`] and not be used after.
#[no_mangle]
pub unsafe extern "C" fn gognn_molecule_free(mol: *mut GognnMolecule) {
    if !mol.is_null() {
        drop(Box::from_raw(mol));
    }
}

/// # Safety
/// `mol` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gognn_molecule_atom_count(
    mol: *const GognnMolecule,
    out: *mut usize,
) -> GognnStatus {
    guard(|| {
        non_null(mol, "mol")?;
        non_null(out, "out")?;
        *out = (*mol).graph.atom_count();
        Ok(())
    })
}

/// # Safety
/// `mol` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gognn_molecule_bond_count(
    mol: *const GognnMolecule,
    out: *mut usize,
) -> GognnStatus {
    guard(|| {
        non_null(mol, "mol")?;
        non_null(out, "out")?;
        *out = (*mol).graph.bonds().len();
        Ok(())
    })
}

/// Copies the row-major `atoms × gognn_feature_dim()` feature matrix into
/// `out`, whose capacity `len` must be at least that size.
///
/// # Safety
/// `mol` must be a live handle; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn gognn_molecule_features(
    mol: *const GognnMolecule,
    out: *mut f64,
    len: usize,
) -> GognnStatus {
    guard(|| {
        non_null(mol, "mol")?;
        non_null(out, "out")?;
        let f = (*mol).graph.feature_matrix();
        let data = f.data();
        if len < data.len() {
            return fail(
                GognnStatus::InvalidArgument,
                format!("buffer holds {len} values, {} needed", data.len()),
            );
        }
        ptr::copy_nonoverlapping(data.as_ptr(), out, data.len());
        Ok(())
    })
}

unsafe fn ranked(scores: *const f64, labels: *const u8, n: usize) -> FfiResult<RankedPredictions> {
    let s = slice(scores, n, "scores")?;
    let l = slice(labels, n, "labels")?;
    RankedPredictions::new(s.to_vec(), l.iter().map(|&b| b != 0).collect())
        .map_err(|e| Failure(GognnStatus::MetricError, e.to_string()))
}

/// Area under the ROC curve of `n` scores with 0/1 labels.
///
/// # Safety
/// `scores` and `labels` must hold `n` elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn gognn_auc(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut f64,
) -> GognnStatus {
    guard(|| {
        non_null(out, "out")?;
        let rp = ranked(scores, labels, n)?;
        *out = auc(&rp).map_err(|e| Failure(GognnStatus::MetricError, e.to_string()))?;
        Ok(())
    })
}

/// Average precision of `n` scores with 0/1 labels.
///
/// # Safety
/// `scores` and `labels` must hold `n` elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn gognn_ap(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut f64,
) -> GognnStatus {
    guard(|| {
        non_null(out, "out")?;
        let rp = ranked(scores, labels, n)?;
        *out = ap(&rp).map_err(|e| Failure(GognnStatus::MetricError, e.to_string()))?;
        Ok(())
    })
}

/// Loads a checkpoint together with the data it was trained on.
/// `interactions` is the scored link file for CCI models (filtered at
/// `threshold`) or the triple file for DDI models.
///
/// # Safety
/// All strings must be NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn gognn_predictor_open(
    checkpoint_path: *const c_char,
    molecules_path: *const c_char,
    interactions_path: *const c_char,
    threshold: u32,
    out: *mut *mut GognnPredictor,
) -> GognnStatus {
    guard(|| {
        non_null(out, "out")?;
        let ckpt = PathBuf::from(text(checkpoint_path, "checkpoint_path")?);
        let mols = PathBuf::from(text(molecules_path, "molecules_path")?);
        let inter = PathBuf::from(text(interactions_path, "interactions_path")?);
        let (model, _) = checkpoint::load(&ckpt).map_err(checkpoint_failure)?;
        let dataset = match model.config.task {
            Task::Cci => load_cci(&inter, &mols, threshold, Strictness::Strict),
            Task::Ddi => load_ddi(&inter, &mols, Strictness::Strict),
        }
        .map_err(data_failure)?;
        if dataset.relation_count() != model.config.relations {
            return fail(
                GognnStatus::DataError,
                format!(
                    "dataset has {} relations, model was trained with {}",
                    dataset.relation_count(),
                    model.config.relations
                ),
            );
        }
        let split = split(dataset.links.len(), &model.config.split, model.config.seed)
            .map_err(data_failure)?;
        *out = Box::into_raw(Box::new(GognnPredictor {
            model,
            dataset,
            split,
        }));
        Ok(())
    })
}

/// # Safety
/// `p` must come from [`gognn_predictor_open`] and not be used after.
#[no_mangle]
pub unsafe extern "C" fn gognn_predictor_free(p: *mut GognnPredictor) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Number of molecules known to the predictor.
///
/// # Safety
/// `p` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn gognn_predictor_molecule_count(
    p: *const GognnPredictor,
    out: *mut usize,
) -> GognnStatus {
    guard(|| {
        non_null(p, "predictor")?;
        non_null(out, "out")?;
        *out = (*p).dataset.molecules.len();
        Ok(())
    })
}

/// Relation count; 0 for CCI models.
///
/// # Safety
/// `p` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn gognn_predictor_relation_count(
    p: *const GognnPredictor,
    out: *mut usize,
) -> GognnStatus {
    guard(|| {
        non_null(p, "predictor")?;
        non_null(out, "out")?;
        *out = (*p).dataset.relation_count();
        Ok(())
    })
}

/// Index of the molecule named `id`.
///
/// # Safety
/// `p` must be a live handle, `id` NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn gognn_predictor_index_of(
    p: *const GognnPredictor,
    id: *const c_char,
    out: *mut usize,
) -> GognnStatus {
    guard(|| {
        non_null(p, "predictor")?;
        non_null(out, "out")?;
        let id = text(id, "id")?;
        *out = (*p).dataset.index_of(id).ok_or_else(|| {
            Failure(
                GognnStatus::InvalidArgument,
                format!("unknown molecule `{id}`"),
            )
        })?;
        Ok(())
    })
}

/// Interaction probabilities for `n` pairs `(first[k], second[k])`.
/// `relations` is ignored (and may be null) for CCI models; DDI models
/// need one relation index per pair.
///
/// # Safety
/// `first`, `second`, `out` (and `relations` for DDI) must hold `n`
/// elements.
#[no_mangle]
pub unsafe extern "C" fn gognn_predictor_predict(
    p: *const GognnPredictor,
    first: *const usize,
    second: *const usize,
    relations: *const usize,
    n: usize,
    out: *mut f64,
) -> GognnStatus {
    guard(|| {
        non_null(p, "predictor")?;
        let p = &*p;
        let a = slice(first, n, "first")?;
        let b = slice(second, n, "second")?;
        let rels = match p.model.config.task {
            Task::Cci => None,
            Task::Ddi => Some(slice(relations, n, "relations")?),
        };
        if n > 0 {
            non_null(out, "out")?;
        }
        let queries: Vec<Link> = (0..n)
            .map(|k| match rels {
                None => Link::untyped(a[k], b[k]),
                Some(r) => Link::typed(a[k], r[k], b[k]),
            })
            .collect();
        let probs =
            predict(&p.model, &p.dataset, &p.split, &[], &queries).map_err(train_failure)?;
        if n > 0 {
            ptr::copy_nonoverlapping(probs.as_ptr(), out, n);
        }
        Ok(())
    })
}
