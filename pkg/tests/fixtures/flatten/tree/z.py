print('zee')
