#ifndef PLRH_H
#define PLRH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Result code of every fallible call.
typedef enum PlrhStatus {
  PLRH_STATUS_OK = 0,
  PLRH_STATUS_NULL_ARGUMENT = 1,
  PLRH_STATUS_INVALID_UTF8 = 2,
  PLRH_STATUS_IO = 3,
  PLRH_STATUS_INVALID_DATA = 4,
  PLRH_STATUS_RETRIEVAL = 5,
  PLRH_STATUS_PROMPT = 6,
  PLRH_STATUS_EVALUATION = 7,
  PLRH_STATUS_NOT_FOUND = 8,
  PLRH_STATUS_OUT_OF_RANGE = 9,
  PLRH_STATUS_PANIC = 10,
} PlrhStatus;

// Which prompt a builder produces.
typedef enum PlrhPromptStage {
  PLRH_PROMPT_STAGE_STAGE1_RATIONALE = 1,
  PLRH_PROMPT_STAGE_STAGE2_RATIONALE = 2,
  PLRH_PROMPT_STAGE_STAGE3_ANSWER = 3,
} PlrhPromptStage;

// A loaded dataset and its train pool.
typedef struct PlrhDataset PlrhDataset;

// A validated, rendered prompt.
typedef struct PlrhPrompt PlrhPrompt;

// Example blocks collected before a prompt is built.
typedef struct PlrhPromptBuilder PlrhPromptBuilder;

// Ranked examples returned by a selection call.
typedef struct PlrhSelection PlrhSelection;

// Message for the last failed call on this thread, or null after a success.
// The pointer stays valid until the next call on the same thread.
const char *plrh_last_error(void);

// # Safety
// `s` must be null or a string returned by this library, not yet freed.
void plrh_string_free(char *s);

// Loads a samples file and a features file (text or binary).
//
// # Safety
// Path arguments must be valid NUL-terminated strings; `out` must be writable.
enum PlrhStatus plrh_dataset_load(const char *samples_path,
                                  const char *features_path,
                                  struct PlrhDataset **out);

// # Safety
// `ds` must be null or a handle from [`plrh_dataset_load`], not yet freed.
void plrh_dataset_free(struct PlrhDataset *ds);

// Number of samples, or 0 for a null handle.
//
// # Safety
// `ds` must be null or a live dataset handle.
size_t plrh_dataset_len(const struct PlrhDataset *ds);

// Number of train samples, or 0 for a null handle.
//
// # Safety
// `ds` must be null or a live dataset handle.
size_t plrh_dataset_train_len(const struct PlrhDataset *ds);

// Feature dimension, or 0 for a null handle.
//
// # Safety
// `ds` must be null or a live dataset handle.
size_t plrh_dataset_feature_dim(const struct PlrhDataset *ds);

// Top-`n` train samples for the dataset sample `sample_id`.
//
// # Safety
// `ds` must be a live dataset handle, `sample_id` a valid string, `out` writable.
enum PlrhStatus plrh_select_for_sample(const struct PlrhDataset *ds,
                                       const char *sample_id,
                                       size_t n,
                                       struct PlrhSelection **out);

// Top-`n` train samples for an arbitrary query vector of the dataset's dimension.
//
// # Safety
// `query` must point to `dim` readable floats; other pointers as above.
enum PlrhStatus plrh_select_examples(const struct PlrhDataset *ds,
                                     const float *query,
                                     size_t dim,
                                     size_t n,
                                     struct PlrhSelection **out);

// # Safety
// `sel` must be null or a live selection handle.
size_t plrh_selection_len(const struct PlrhSelection *sel);

// Id and score at `rank` (0-based). `out_id` receives a caller-owned string.
//
// # Safety
// `sel` must be a live selection handle; `out_id` and `out_score` writable.
enum PlrhStatus plrh_selection_get(const struct PlrhSelection *sel,
                                   size_t rank,
                                   char **out_id,
                                   double *out_score);

// # Safety
// `sel` must be null or a live selection handle.
void plrh_selection_free(struct PlrhSelection *sel);

// Cosine similarity of two vectors of length `dim`.
//
// # Safety
// `a` and `b` must point to `dim` readable floats; `out` must be writable.
enum PlrhStatus plrh_cosine_similarity(const float *a, const float *b, size_t dim, double *out);

// Normalized form of an answer string, as used for scoring.
//
// # Safety
// `answer` must be a valid string; `out` must be writable.
enum PlrhStatus plrh_normalize_answer(const char *answer, char **out);

// Soft accuracy of `predicted` against `n_answers` annotations.
//
// # Safety
// `answers` must point to `n_answers` valid strings; out pointers writable.
enum PlrhStatus plrh_score_sample(const char *predicted,
                                  const char *const *answers,
                                  size_t n_answers,
                                  size_t *out_matches,
                                  double *out_accuracy);

// Starts a prompt for `stage`, one of the [`PlrhPromptStage`] values.
// `no_rationale` selects the stage-3 variant without rationales and is
// ignored for the other stages.
//
// # Safety
// `head` must be a valid string; `out` must be writable.
enum PlrhStatus plrh_prompt_builder_new(uint32_t stage,
                                        const char *head,
                                        bool no_rationale,
                                        struct PlrhPromptBuilder **out);

// Appends an in-context example. `answer` and `rationale` may be null.
//
// # Safety
// `b` must be a live builder; non-null strings must be valid.
enum PlrhStatus plrh_prompt_builder_add_example(struct PlrhPromptBuilder *b,
                                                const char *caption,
                                                const char *question,
                                                const char *answer,
                                                const char *rationale);

// Sets the input block. `answer` and `rationale` may be null.
//
// # Safety
// As for [`plrh_prompt_builder_add_example`].
enum PlrhStatus plrh_prompt_builder_set_input(struct PlrhPromptBuilder *b,
                                              const char *caption,
                                              const char *question,
                                              const char *answer,
                                              const char *rationale);

// Validates and renders the prompt. The builder stays usable.
//
// # Safety
// `b` must be a live builder; `out` must be writable.
enum PlrhStatus plrh_prompt_build(const struct PlrhPromptBuilder *b, struct PlrhPrompt **out);

// # Safety
// `b` must be null or a live builder.
void plrh_prompt_builder_free(struct PlrhPromptBuilder *b);

// Rendered text, borrowed from the prompt; null for a null handle.
//
// # Safety
// `p` must be null or a live prompt handle.
const char *plrh_prompt_text(const struct PlrhPrompt *p);

// Lowercase hex SHA-256 of the rendered text, borrowed from the prompt.
//
// # Safety
// `p` must be null or a live prompt handle.
const char *plrh_prompt_hash(const struct PlrhPrompt *p);

// Number of in-context examples.
//
// # Safety
// `p` must be null or a live prompt handle.
size_t plrh_prompt_example_count(const struct PlrhPrompt *p);

// # Safety
// `p` must be null or a live prompt handle.
void plrh_prompt_free(struct PlrhPrompt *p);

#endif  /* PLRH_H */
