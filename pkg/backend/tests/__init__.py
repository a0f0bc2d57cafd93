# Test suite for the bbdfml backend
