#include "stcnet/nn.hpp"

namespace stcnet::nn {

template struct Parameter<float>;
template struct Parameter<double>;
template class ParamStore<float>;
template class ParamStore<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace stcnet::nn
