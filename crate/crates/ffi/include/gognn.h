#ifndef GOGNN_H
#define GOGNN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GognnStatus {
  GOGNN_STATUS_OK = 0,
  GOGNN_STATUS_NULL_ARGUMENT = 1,
  GOGNN_STATUS_INVALID_ARGUMENT = 2,
  GOGNN_STATUS_PARSE_ERROR = 3,
  GOGNN_STATUS_IO_ERROR = 4,
  GOGNN_STATUS_DATA_ERROR = 5,
  GOGNN_STATUS_CHECKPOINT_ERROR = 6,
  GOGNN_STATUS_METRIC_ERROR = 7,
  GOGNN_STATUS_PANIC = 8,
} GognnStatus;

// Parsed molecule.
typedef struct GognnMolecule GognnMolecule;

// Trained model bound to the dataset it was trained on.
typedef struct GognnPredictor GognnPredictor;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null if none. The
// pointer stays valid until the next failing call on the same thread.
const char *gognn_last_error(void);

// Library version as a static NUL-terminated string.
const char *gognn_version(void);

// Width of one atom feature row.
size_t gognn_feature_dim(void);

// Parses a SMILES string into a new molecule handle.
//
// # Safety
// `smiles` must be a NUL-terminated string and `out` a valid pointer.
enum GognnStatus gognn_molecule_parse(const char *smiles, struct GognnMolecule **out);

// # Safety
// `mol` must come from [`gognn_molecule_parse`] and not be used after.
void gognn_molecule_free(struct GognnMolecule *mol);

// # Safety
// `mol` must be a live handle and `out` a valid pointer.
enum GognnStatus gognn_molecule_atom_count(const struct GognnMolecule *mol, size_t *out);

// # Safety
// `mol` must be a live handle and `out` a valid pointer.
enum GognnStatus gognn_molecule_bond_count(const struct GognnMolecule *mol, size_t *out);

// Copies the row-major `atoms × gognn_feature_dim()` feature matrix into
// `out`, whose capacity `len` must be at least that size.
//
// # Safety
// `mol` must be a live handle; `out` must hold `len` doubles.
enum GognnStatus gognn_molecule_features(const struct GognnMolecule *mol, double *out, size_t len);

// Area under the ROC curve of `n` scores with 0/1 labels.
//
// # Safety
// `scores` and `labels` must hold `n` elements; `out` must be valid.
enum GognnStatus gognn_auc(const double *scores, const uint8_t *labels, size_t n, double *out);

// Average precision of `n` scores with 0/1 labels.
//
// # Safety
// `scores` and `labels` must hold `n` elements; `out` must be valid.
enum GognnStatus gognn_ap(const double *scores, const uint8_t *labels, size_t n, double *out);

// Loads a checkpoint together with the data it was trained on.
// `interactions` is the scored link file for CCI models (filtered at
// `threshold`) or the triple file for DDI models.
//
// # Safety
// All strings must be NUL-terminated; `out` must be valid.
enum GognnStatus gognn_predictor_open(const char *checkpoint_path,
                                      const char *molecules_path,
                                      const char *interactions_path,
                                      uint32_t threshold,
                                      struct GognnPredictor **out);

// # Safety
// `p` must come from [`gognn_predictor_open`] and not be used after.
void gognn_predictor_free(struct GognnPredictor *p);

// Number of molecules known to the predictor.
//
// # Safety
// `p` must be a live handle and `out` valid.
enum GognnStatus gognn_predictor_molecule_count(const struct GognnPredictor *p, size_t *out);

// Relation count; 0 for CCI models.
//
// # Safety
// `p` must be a live handle and `out` valid.
enum GognnStatus gognn_predictor_relation_count(const struct GognnPredictor *p, size_t *out);

// Index of the molecule named `id`.
//
// # Safety
// `p` must be a live handle, `id` NUL-terminated and `out` valid.
enum GognnStatus gognn_predictor_index_of(const struct GognnPredictor *p,
                                          const char *id,
                                          size_t *out);

// Interaction probabilities for `n` pairs `(first[k], second[k])`.
// `relations` is ignored (and may be null) for CCI models; DDI models
// need one relation index per pair.
//
// # Safety
// `first`, `second`, `out` (and `relations` for DDI) must hold `n`
// elements.
enum GognnStatus gognn_predictor_predict(const struct GognnPredictor *p,
                                         const size_t *first,
                                         const size_t *second,
                                         const size_t *relations,
                                         size_t n,
                                         double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GOGNN_H */
