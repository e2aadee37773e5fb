#include <math.h>
#include <stdio.h>
#include <string.h>

#include "dpsgd_lab.h"

#define CHECK(cond)                                                  \
    do {                                                             \
        if (!(cond)) {                                               \
            fprintf(stderr, "%s:%d: %s\n", __FILE__, __LINE__, #cond); \
            return 1;                                                \
        }                                                            \
    } while (0)

int main(void) {
    CHECK(strlen(dl_version()) > 0);

    DlLedger *ledger = NULL;
    CHECK(dl_ledger_new(1e-5, &ledger) == DL_STATUS_OK);
    CHECK(dl_ledger_push_phase(ledger, 256.0 / 60000.0, 1.0, 235) == DL_STATUS_OK);
    double eps = 0.0, order = 0.0;
    CHECK(dl_ledger_epsilon(ledger, &eps, &order) == DL_STATUS_OK);
    double direct = 0.0, direct_order = 0.0;
    CHECK(dl_epsilon_for(256.0 / 60000.0, 1.0, 235, 1e-5, &direct, &direct_order) == DL_STATUS_OK);
    CHECK(eps == direct && order == direct_order);
    CHECK(dl_ledger_push_phase(ledger, 2.0, 1.0, 1) == DL_STATUS_INVALID_ARGUMENT);
    char msg[256];
    CHECK(dl_last_error_message(msg, sizeof msg) > 0 && strlen(msg) > 0);
    dl_ledger_free(ledger);

    DlModel *model = NULL;
    CHECK(dl_model_new(DL_ARCH_MNIST_CNN, DL_ACTIVATION_BOUNDED_RELU, 2.0, 7, &model) == DL_STATUS_OK);
    size_t len = dl_model_input_len(model);
    size_t classes = dl_model_num_classes(model);
    CHECK(len == 784 && classes == 10);
    static double input[2 * 784];
    for (size_t i = 0; i < 2 * len; i++) input[i] = (double)(i % 17) / 17.0;
    double probs[20];
    CHECK(dl_model_predict(model, input, 2, probs) == DL_STATUS_OK);
    for (int r = 0; r < 2; r++) {
        double s = 0.0;
        for (size_t k = 0; k < classes; k++) s += probs[r * classes + k];
        CHECK(fabs(s - 1.0) < 1e-9);
    }
    dl_model_free(model);

    DlRng *rng = dl_rng_new(3);
    double u = dl_rng_next_f64(rng);
    CHECK(u >= 0.0 && u < 1.0);
    dl_rng_free(rng);
    puts("ok");
    return 0;
}
