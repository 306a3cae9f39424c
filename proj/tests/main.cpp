#include <gtest/gtest.h>

#include "vialguard/nn.hpp"

int main(int argc, char** argv) {
  vialguard::nn::ensure_reliable_blas(argv);
  testing::InitGoogleTest(&argc, argv);
  return RUN_ALL_TESTS();
}
