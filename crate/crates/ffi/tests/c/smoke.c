#include <math.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#include "mmvc.h"

#define CHECK(call, want)                                                          \
  do {                                                                             \
    MmvcStatus st_ = (call);                                                       \
    if (st_ != (want)) {                                                           \
      const char *e_ = mmvc_last_error();                                          \
      printf("%s: status %d (%s)\n", #call, (int)st_, e_ ? e_ : "no message");     \
      return 1;                                                                    \
    }                                                                              \
  } while (0)

int main(void) {
  const char *overrides[] = {"graph.topology=\"shared\""};
  MmvcConfig *cfg = NULL;
  CHECK(mmvc_config_new("ht+as-like", NULL, overrides, 1, &cfg), MMVC_STATUS_OK);

  MmvcModel *model = NULL;
  CHECK(mmvc_model_new(cfg, 5, &model), MMVC_STATUS_OK);
  MmvcDims dims;
  CHECK(mmvc_model_dims(model, &dims), MMVC_STATUS_OK);
  size_t d = 0;
  CHECK(mmvc_model_space_dim(model, MMVC_SPACE_VAT, &d), MMVC_STATUS_OK);
  CHECK(mmvc_model_space_dim(model, MMVC_SPACE_VA, &d), MMVC_STATUS_UNREACHABLE_PAIR);
  CHECK(mmvc_model_space_dim(model, MMVC_SPACE_VAT, &d), MMVC_STATUS_OK);

  float *z = calloc(d, sizeof(float));
  uint32_t ids[] = {2, 9, 4};
  CHECK(mmvc_model_embed_text(model, ids, 3, MMVC_SPACE_VAT, z, d), MMVC_STATUS_OK);
  double norm = 0.0;
  for (size_t i = 0; i < d; i++) norm += (double)z[i] * z[i];
  if (fabs(sqrt(norm) - 1.0) > 1e-4) {
    printf("norm %f\n", sqrt(norm));
    return 1;
  }
  CHECK(mmvc_model_embed_text(model, ids, 3, MMVC_SPACE_VAT, z, d - 1), MMVC_STATUS_BUFFER_TOO_SMALL);
  CHECK(mmvc_model_embed_text(NULL, ids, 3, MMVC_SPACE_VAT, z, d), MMVC_STATUS_NULL_POINTER);

  char *toml = NULL;
  CHECK(mmvc_config_to_toml(cfg, &toml), MMVC_STATUS_OK);
  if (strstr(toml, "shared") == NULL) return 1;
  mmvc_string_free(toml);

  free(z);
  mmvc_model_free(model);
  mmvc_config_free(cfg);
  printf("smoke ok %s\n", mmvc_version());
  return 0;
}
