#ifndef WBC_WBC_HPP_
#define WBC_WBC_HPP_

#include "wbc/errors.hpp"
#include "wbc/geometry.hpp"
#include "wbc/head_decoder.hpp"
#include "wbc/anchor_kmeans.hpp"
#include "wbc/postprocess.hpp"
#include "wbc/dataset.hpp"
#include "wbc/tensor_file.hpp"
#include "wbc/inference.hpp"
#include "wbc/pipeline.hpp"
#include "wbc/evaluation.hpp"

#endif  // WBC_WBC_HPP_
